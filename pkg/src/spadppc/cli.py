"""Command-line pipeline: simulate, extract, filter, sample, eval, bench,
compress, decompress and sweep.

Every option can also come from a plain ``key=value`` config file
(``--config``). Precedence is command-line flag, then ``PPC_SEED`` (seed
only), then the config file, then built-in defaults. Each run writes the
fully resolved config next to its main output (``<out>.cfg``); passing that
file back with ``--config`` repeats the run exactly.

Exit codes: 0 success, 2 invalid configuration or input data, 3 file I/O
failure (missing, unreadable or unwritable files).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .eval import (benchmark, depth_rmse, filter_pr_curve, label_points, make_report, precision_at_recall,
                   sampling_purity, score_histogram)
from .histogram_proc import (FourierCode, compress_fourier, decompress_fourier, estimate_frame,
                             read_fourier, spatial_gaussian_denoise, threshold_baseline, write_fourier)
from .ppc import build_ppc, read_ply, write_ply
from .scene import (CameraIntrinsics, load_scene, read_depth_map, render_scene, standard_scene,
                    write_albedo_map, write_depth_map)
from .spad_sim import (HistogramFrame, PulseModel, SbrTarget, SensorConfig, read_frame, simulate_frame,
                       write_frame)
from .spatial_ops import FppsParams, NpdParams, fps, fpps, npd_filter, npd_scores

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3

SEED_ENV = "PPC_SEED"


class ConfigError(ValueError):
    pass


def _opt_float(text):
    return None if str(text).lower() in ("", "auto", "none") else float(text)


def _opt_str(text):
    return None if str(text).lower() in ("", "none") else str(text)


def _bool(text):
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _seed(text):
    v = int(text, 0) if isinstance(text, str) else int(text)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


# name -> (parser, default, help)
OPTIONS = {
    "scene": (str, "standard", "scene file, or 'standard' for the built-in room"),
    "width": (int, 128, "image width in pixels"),
    "height": (int, 96, "image height in pixels"),
    "fx": (_opt_float, None, "focal length in pixels (auto: width)"),
    "fy": (_opt_float, None, "focal length in pixels (auto: width)"),
    "cx": (_opt_float, None, "principal point (auto: width/2)"),
    "cy": (_opt_float, None, "principal point (auto: height/2)"),
    "num_bins": (int, 1024, "histogram bins N"),
    "bin_width": (float, 97e-12, "bin width in seconds"),
    "repetition_period": (float, 100e-9, "laser repetition period in seconds"),
    "fwhm": (float, 350e-12, "pulse FWHM in seconds"),
    "sbr": (str, "5:50", "mean signal:background photons per pixel"),
    "seed": (_seed, 0, "64-bit simulation / sampling seed"),
    "quantum_efficiency": (float, 0.5, "detector quantum efficiency"),
    "dark_count": (float, 0.0, "dark counts per bin"),
    "workers": (int, 1, "worker threads (never changes results)"),
    "mode": (str, "matched", "peak detection domain: raw or matched"),
    "min_height": (_opt_float, None, "minimum peak height (auto: kernel peak)"),
    "threshold": (_opt_float, None, "extra peak-height threshold baseline (none: off)"),
    "denoise": (_bool, False, "5x5 spatial Gaussian denoise before extraction"),
    "alpha": (float, 0.003, "NPD keep threshold"),
    "radius": (float, 0.2, "NPD ball radius in metres"),
    "max_neighbors": (int, 64, "NPD neighbour cap L"),
    "method": (str, "fpps", "keypoint sampler: fps or fpps"),
    "beta": (float, 0.01, "FPPS probability cutoff"),
    "count": (int, 1024, "number of keypoints"),
    "k": (int, 32, "Fourier coefficients kept per histogram"),
    "eps_bins": (float, 3.0, "ground-truth tolerance in bins"),
    "recall": (float, 0.8, "recall level for the precision comparison"),
    "hist_bins": (int, 50, "score histogram bins"),
    "repetitions": (int, 5, "benchmark repetitions"),
    "grid": (_opt_str, None, "sweep grid, e.g. 'alpha=0.001,0.003;beta=0,0.01'"),
    "input": (_opt_str, None, "input file"),
    "gt_depth": (_opt_str, None, "ground-truth depth map"),
    "out": (_opt_str, None, "output path"),
    "depth_out": (_opt_str, None, "also write the ground-truth depth map here"),
    "albedo_out": (_opt_str, None, "also write the albedo map here"),
}

COMMAND_KEYS = {
    "simulate": ["scene", "width", "height", "fx", "fy", "cx", "cy", "num_bins", "bin_width",
                 "repetition_period", "fwhm", "sbr", "seed", "quantum_efficiency", "dark_count", "workers",
                 "out", "depth_out", "albedo_out"],
    "extract": ["input", "fx", "fy", "cx", "cy", "mode", "min_height", "threshold", "denoise", "out"],
    "filter": ["input", "alpha", "radius", "max_neighbors", "out"],
    "sample": ["input", "method", "count", "beta", "seed", "out"],
    "eval": ["input", "gt_depth", "bin_width", "eps_bins", "alpha", "radius", "max_neighbors", "beta",
             "count", "recall", "hist_bins", "out"],
    "bench": ["input", "fx", "fy", "cx", "cy", "mode", "min_height", "alpha", "radius", "max_neighbors",
              "beta", "count", "repetitions", "out"],
    "compress": ["input", "k", "out"],
    "decompress": ["input", "width", "height", "fx", "fy", "cx", "cy", "bin_width", "repetition_period",
                   "fwhm", "out"],
    "sweep": ["input", "gt_depth", "fx", "fy", "cx", "cy", "mode", "min_height", "threshold", "alpha",
              "radius", "max_neighbors", "beta", "count", "eps_bins", "recall", "hist_bins", "grid", "out"],
}

REQUIRED = {
    "simulate": ["out"],
    "extract": ["input", "out"],
    "filter": ["input", "out"],
    "sample": ["input", "out"],
    "eval": ["input", "gt_depth", "out"],
    "bench": ["input", "out"],
    "compress": ["input", "out"],
    "decompress": ["input", "out"],
    "sweep": ["input", "gt_depth", "grid", "out"],
}

SWEEP_KEYS = ("alpha", "radius", "max_neighbors", "beta", "count", "threshold", "mode", "min_height",
              "eps_bins")


# --- configuration -----------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key=value`` lines; ``#`` starts a comment, blank lines are ignored.
    Dashes in keys are read as underscores."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def _coerce(key, value):
    parser = OPTIONS[key][0]
    try:
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def resolve_config(command: str, flags: dict, file_values: dict | None = None,
                   environ: dict | None = None) -> dict:
    """Merge defaults < config file < ``PPC_SEED`` < flags for ``command``."""
    environ = os.environ if environ is None else environ
    cfg = {}
    for key in COMMAND_KEYS[command]:
        cfg[key] = OPTIONS[key][1]
        if file_values and key in file_values:
            cfg[key] = _coerce(key, file_values[key])
        if key == "seed" and environ.get(SEED_ENV, "") != "":
            cfg[key] = _coerce(key, environ[SEED_ENV])
        if flags.get(key) is not None:
            cfg[key] = _coerce(key, flags[key])
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-")
                                                                             for m in missing))
    return cfg


def format_config(command: str, cfg: dict) -> str:
    lines = [f"# spadppc {__version__} resolved config for '{command}'"]
    lines += [f"{k}={_format_value(v)}" for k, v in cfg.items()]
    return "\n".join(lines) + "\n"


def config_path_for(out: str) -> Path:
    p = Path(out)
    return p / "run.cfg" if p.is_dir() else p.with_name(p.name + ".cfg")


# --- builders shared by subcommands -----------------------------------------


def _intrinsics(cfg, width, height) -> CameraIntrinsics:
    base = CameraIntrinsics.default(width, height)
    pick = lambda key: getattr(base, key) if cfg.get(key) is None else cfg[key]  # noqa: E731
    return CameraIntrinsics(width, height, pick("fx"), pick("fy"), pick("cx"), pick("cy"))


def _pulse(cfg, num_bins=None) -> PulseModel:
    return PulseModel(num_bins if num_bins is not None else cfg["num_bins"], cfg["bin_width"],
                      cfg["repetition_period"], cfg["fwhm"])


def _need_file(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")


def _load_frame(cfg) -> HistogramFrame:
    _need_file(cfg["input"])
    frame = read_frame(cfg["input"])
    h, w = frame.intrinsics.shape
    return replace(frame, intrinsics=_intrinsics(cfg, w, h))


def _npd_params(cfg) -> NpdParams:
    return NpdParams(cfg["max_neighbors"], cfg["radius"], cfg["alpha"])


def _check_mode(mode):
    if mode not in ("raw", "matched"):
        raise ConfigError(f"mode must be 'raw' or 'matched', got {mode!r}")


def extract_cloud(frame: HistogramFrame, mode="matched", min_height=None, threshold=None, denoise=False):
    """The extract chain: optional denoise, peak estimation, optional
    threshold baseline, point cloud."""
    _check_mode(mode)
    if denoise:
        frame = spatial_gaussian_denoise(frame)
    est = estimate_frame(frame, mode, min_height)
    if threshold is not None:
        est = threshold_baseline(est, threshold)
    meta = {"mode": mode, "seed": frame.seed, "bin_width": repr(frame.pulse.bin_width)}
    return build_ppc(est, frame.intrinsics, meta)


def evaluate_cloud(cloud, gt_depth, cfg) -> dict:
    """Label a cloud, NPD-filter it and score both filters and samplers."""
    labels = label_points(cloud, gt_depth, cfg["bin_width"], cfg["eps_bins"])
    params = _npd_params(cfg)
    scores = npd_scores(cloud, params)
    keep = scores >= params.alpha
    purity = {}
    count = min(cfg["count"], len(cloud))
    if count:
        purity["fps"] = sampling_purity(fps(cloud, count), labels)
        purity["fpps"] = sampling_purity(fpps(cloud, FppsParams(cfg["beta"], count)), labels)
    # the same samplers run on the NPD-kept points, as in the full pipeline
    kept = np.flatnonzero(keep)
    count = min(cfg["count"], len(kept))
    if count:
        sub, sub_labels = cloud.subset(kept), labels[kept]
        purity["fps_npd"] = sampling_purity(fps(sub, count), sub_labels)
        purity["fpps_npd"] = sampling_purity(fpps(sub, FppsParams(cfg["beta"], count)), sub_labels)
    hists = {}
    if len(cloud):
        hists["probability"] = score_histogram(cloud.probability, labels, cfg["hist_bins"], (0.0, 1.0))
        hists["npd"] = score_histogram(scores, labels, cfg["hist_bins"], (0.0, 1.0))
    rec = cfg["recall"]
    prec = {"probability": precision_at_recall(labels, cloud.probability, rec),
            "npd": precision_at_recall(labels, scores, rec)}
    params_out = {k: cfg[k] for k in ("alpha", "radius", "max_neighbors", "beta", "count", "eps_bins",
                                      "recall")}
    params_out["precision_at_recall"] = prec
    params_out["npd_pr_curve"] = [vars(p) for p in filter_pr_curve(labels, scores, [params.alpha])]
    return make_report(cloud, labels, keep, depth_rmse_value=depth_rmse(cloud, gt_depth, labels), purity=purity,
                       histograms=hists, params=params_out)


# --- subcommands -------------------------------------------------------------


def cmd_simulate(cfg):
    spec = standard_scene() if cfg["scene"] == "standard" else _load_spec(cfg["scene"])
    intr = _intrinsics(cfg, cfg["width"], cfg["height"])
    depth, albedo = render_scene(spec, intr)
    sensor = SensorConfig(cfg["quantum_efficiency"], cfg["dark_count"])
    frame = simulate_frame(depth, albedo, _pulse(cfg), sensor, SbrTarget.parse(cfg["sbr"]), cfg["seed"],
                           workers=cfg["workers"])
    write_frame(frame, cfg["out"])
    if cfg["depth_out"]:
        write_depth_map(depth, cfg["depth_out"])
    if cfg["albedo_out"]:
        write_albedo_map(albedo, cfg["albedo_out"])


def _load_spec(path):
    _need_file(path)
    return load_scene(path)


def cmd_extract(cfg):
    frame = _load_frame(cfg)
    write_ply(extract_cloud(frame, cfg["mode"], cfg["min_height"], cfg["threshold"], cfg["denoise"]), cfg["out"])


def _load_ply(path):
    _need_file(path)
    return read_ply(path)


def cmd_filter(cfg):
    cloud = _load_ply(cfg["input"])
    write_ply(npd_filter(cloud, _npd_params(cfg)), cfg["out"])


def cmd_sample(cfg):
    cloud = _load_ply(cfg["input"])
    if cfg["method"] == "fps":
        idx = fps(cloud, cfg["count"])
    elif cfg["method"] == "fpps":
        idx = fpps(cloud, FppsParams(cfg["beta"], cfg["count"]))
    else:
        raise ConfigError(f"method must be 'fps' or 'fpps', got {cfg['method']!r}")
    write_ply(cloud.subset(idx), cfg["out"])
    Path(cfg["out"] + ".idx").write_text("".join(f"{i}\n" for i in idx.tolist()))


def _write_report(report, out):
    Path(out).write_text(report.to_json())
    stem = str(Path(out).with_suffix(""))
    for name, hist in report.histograms.items():
        hist.write_csv(f"{stem}.{name}_hist.csv")


def cmd_eval(cfg):
    cloud = _load_ply(cfg["input"])
    _need_file(cfg["gt_depth"])
    gt = read_depth_map(cfg["gt_depth"])
    _write_report(evaluate_cloud(cloud, gt, cfg), cfg["out"])


def cmd_bench(cfg):
    frame = _load_frame(cfg)
    _check_mode(cfg["mode"])
    res = benchmark(frame, _npd_params(cfg), FppsParams(cfg["beta"], cfg["count"]), cfg["repetitions"],
                    cfg["mode"], cfg["min_height"])
    Path(cfg["out"]).write_text(json.dumps(res, indent=2, sort_keys=True))


def cmd_compress(cfg):
    _need_file(cfg["input"])
    frame = read_frame(cfg["input"])
    write_fourier(compress_fourier(frame.counts, cfg["k"]), cfg["out"])


def cmd_decompress(cfg):
    _need_file(cfg["input"])
    code: FourierCode = read_fourier(cfg["input"])
    h, w = code.coefficients.shape[:2]
    intr = _intrinsics(cfg, w, h)
    frame = HistogramFrame(intr, _pulse(cfg, code.num_bins), decompress_fourier(code))
    write_frame(frame, cfg["out"])


def parse_grid(text: str) -> list[dict]:
    """``'alpha=0.001,0.003;beta=0,0.01'`` -> Cartesian product of cells."""
    axes = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ConfigError(f"grid axis must be key=v1,v2,..., got {part!r}")
        key, values = (s.strip() for s in part.split("=", 1))
        key = key.replace("-", "_")
        if key not in SWEEP_KEYS:
            raise ConfigError(f"cannot sweep {key!r}; choose from {', '.join(SWEEP_KEYS)}")
        axes.append([(key, _coerce(key, v.strip())) for v in values.split(",") if v.strip()])
    if not axes:
        raise ConfigError("empty sweep grid")
    return [dict(cell) for cell in itertools.product(*axes)]


def cmd_sweep(cfg):
    frame = _load_frame(cfg)
    _need_file(cfg["gt_depth"])
    gt = read_depth_map(cfg["gt_depth"])
    cfg = dict(cfg, bin_width=frame.pulse.bin_width)
    cells = parse_grid(cfg["grid"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, cell in enumerate(cells):
        c = dict(cfg, **cell)
        cloud = extract_cloud(frame, c["mode"], c["min_height"], c["threshold"])
        report = evaluate_cloud(cloud, gt, c)
        _write_report(report, out / f"cell_{i:03d}.json")
        rows.append({"cell": i, **{k: _format_value(v) for k, v in cell.items()},
                     "precision": report.precision, "recall": report.recall, "f1": report.f1,
                     "purity_fpps": report.purity.get("fpps", float("nan")),
                     "purity_fps": report.purity.get("fps", float("nan")),
                     "purity_fpps_npd": report.purity.get("fpps_npd", float("nan")),
                     "purity_fps_npd": report.purity.get("fps_npd", float("nan"))})
    with open(out / "summary.csv", "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


COMMANDS = {
    "simulate": (cmd_simulate, "simulate a histogram frame of a scene"),
    "extract": (cmd_extract, "turn a histogram frame into a probabilistic point cloud"),
    "filter": (cmd_filter, "NPD-filter a point cloud"),
    "sample": (cmd_sample, "pick keypoints with FPS or FPPS"),
    "eval": (cmd_eval, "score a point cloud against ground-truth depth"),
    "bench": (cmd_bench, "time extraction, NPD filtering and sampling"),
    "compress": (cmd_compress, "truncated-Fourier compress a histogram frame"),
    "decompress": (cmd_decompress, "rebuild a real-valued frame from Fourier codes"),
    "sweep": (cmd_sweep, "evaluate a Cartesian grid of parameters"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spadppc", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"spadppc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key=value config file")
        for key in COMMAND_KEYS[name]:
            default, help_ = OPTIONS[key][1], OPTIONS[key][2]
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                           help=f"{help_} (default: {_format_value(default)})")
    return parser


def run(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = None
        if args.config:
            file_values = parse_config_text(Path(args.config).read_text(), args.config)
        cfg = resolve_config(args.command, flags, file_values, environ)
        COMMANDS[args.command][0](cfg)
        config_path_for(cfg["out"]).write_text(format_config(args.command, cfg))
    except OSError as exc:
        print(f"spadppc {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"spadppc {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
