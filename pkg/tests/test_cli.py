import json

import numpy as np
import pytest

from spadppc import cli
from spadppc.histogram_proc import compress_fourier, write_fourier
from spadppc.ppc import read_ply, write_ply
from spadppc.scene import CameraIntrinsics, format_scene, render_scene, standard_scene
from spadppc.spad_sim import PulseModel, SbrTarget, SensorConfig, read_frame, simulate_frame, write_frame
from spadppc.spatial_ops import FppsParams, NpdParams, fps, fpps, npd_filter

SIZE = ["--width", "40", "--height", "30"]


def run(*argv, env=None):
    return cli.run([str(a) for a in argv], environ=env or {})


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("simulate", *SIZE, "--sbr", "1:50", "--seed", 7, "--out", d / "f.sph",
               "--depth-out", d / "gt.dpt") == 0
    assert run("extract", "--input", d / "f.sph", "--out", d / "c.ply") == 0
    return d


def library_frame(seed=7, sbr=(1, 50)):
    depth, albedo = render_scene(standard_scene(), CameraIntrinsics.default(40, 30))
    return simulate_frame(depth, albedo, PulseModel(), SensorConfig(), SbrTarget(*sbr), seed)


def test_simulate_matches_library_bytes(workdir, tmp_path):
    write_frame(library_frame(), tmp_path / "lib.sph")
    assert (workdir / "f.sph").read_bytes() == (tmp_path / "lib.sph").read_bytes()
    frame = read_frame(workdir / "f.sph")
    assert frame.counts.shape == (30, 40, 1024) and frame.pulse.bin_width == 97e-12


def test_simulate_is_repeatable_and_worker_independent(workdir, tmp_path):
    assert run("simulate", *SIZE, "--sbr", "1:50", "--seed", 7, "--workers", 4, "--out", tmp_path / "g.sph") == 0
    assert (tmp_path / "g.sph").read_bytes() == (workdir / "f.sph").read_bytes()


def test_scene_file_input(tmp_path):
    (tmp_path / "room.scene").write_text(format_scene(standard_scene()))
    assert run("simulate", *SIZE, "--scene", tmp_path / "room.scene", "--sbr", "5:50", "--seed", 3,
               "--out", tmp_path / "a.sph") == 0
    assert run("simulate", *SIZE, "--sbr", "5:50", "--seed", 3, "--out", tmp_path / "b.sph") == 0
    assert (tmp_path / "a.sph").read_bytes() == (tmp_path / "b.sph").read_bytes()


def test_extract_matches_library(workdir, tmp_path):
    cloud = cli.extract_cloud(library_frame())
    write_ply(cloud, tmp_path / "lib.ply")
    assert (workdir / "c.ply").read_bytes() == (tmp_path / "lib.ply").read_bytes()


def test_filter_flags_reproduce_library_defaults(workdir, tmp_path):
    assert run("filter", "--input", workdir / "c.ply", "--alpha", 0.003, "--radius", 0.2, "--max-neighbors", 64,
               "--out", tmp_path / "a.ply") == 0
    assert run("filter", "--input", workdir / "c.ply", "--out", tmp_path / "b.ply") == 0
    write_ply(npd_filter(read_ply(workdir / "c.ply"), NpdParams()), tmp_path / "lib.ply")
    blobs = {(tmp_path / n).read_bytes() for n in ("a.ply", "b.ply", "lib.ply")}
    assert len(blobs) == 1


def test_sample_fpps_beta_zero_equals_fps(workdir, tmp_path):
    assert run("sample", "--input", workdir / "c.ply", "--method", "fpps", "--beta", 0, "--count", 50,
               "--out", tmp_path / "a.ply") == 0
    assert run("sample", "--input", workdir / "c.ply", "--method", "fps", "--count", 50,
               "--out", tmp_path / "b.ply") == 0
    a = (tmp_path / "a.ply.idx").read_text()
    assert a == (tmp_path / "b.ply.idx").read_text()
    cloud = read_ply(workdir / "c.ply")
    assert [int(x) for x in a.split()] == fps(cloud, 50).tolist()
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_sample_default_is_fpps(workdir, tmp_path):
    assert run("sample", "--input", workdir / "c.ply", "--count", 20, "--out", tmp_path / "s.ply") == 0
    idx = [int(x) for x in (tmp_path / "s.ply.idx").read_text().split()]
    assert idx == fpps(read_ply(workdir / "c.ply"), FppsParams(0.01, 20)).tolist()


def test_eval_writes_report_and_csv(workdir, tmp_path):
    out = tmp_path / "r.json"
    assert run("eval", "--input", workdir / "c.ply", "--gt-depth", workdir / "gt.dpt", "--count", 32,
               "--out", out) == 0
    report = json.loads(out.read_text())
    c = report["counts"]
    assert c["gt_kept"] + c["gt_removed"] + c["noise_kept"] + c["noise_removed"] == report["num_points"]
    assert set(report["purity"]) == {"fps", "fpps", "fps_npd", "fpps_npd"}
    assert (tmp_path / "r.npd_hist.csv").read_text().startswith("bin_left,bin_right,gt_frac,noise_frac")
    assert (tmp_path / "r.probability_hist.csv").exists()


def test_bench_json(workdir, tmp_path):
    assert run("bench", "--input", workdir / "f.sph", "--repetitions", 3, "--count", 16,
               "--out", tmp_path / "b.json") == 0
    assert json.loads((tmp_path / "b.json").read_text())["num_points"] > 0


def test_compress_decompress_extract(workdir, tmp_path):
    assert run("compress", "--input", workdir / "f.sph", "--k", 32, "--out", tmp_path / "f.fou") == 0
    frame = read_frame(workdir / "f.sph")
    write_fourier(compress_fourier(frame.counts, 32), tmp_path / "lib.fou")
    assert (tmp_path / "f.fou").read_bytes() == (tmp_path / "lib.fou").read_bytes()
    assert run("decompress", "--input", tmp_path / "f.fou", "--out", tmp_path / "g.sph") == 0
    back = read_frame(tmp_path / "g.sph")
    assert back.counts.dtype == np.float64 and back.counts.shape == frame.counts.shape
    assert (tmp_path / "g.sph").read_bytes()[:8] == b"SPADHSF1"
    assert run("extract", "--input", tmp_path / "g.sph", "--out", tmp_path / "g.ply") == 0


def test_sweep_emits_one_report_per_cell(workdir, tmp_path):
    out = tmp_path / "sweep"
    assert run("sweep", "--input", workdir / "f.sph", "--gt-depth", workdir / "gt.dpt", "--count", 16,
               "--grid", "alpha=0.001,0.003;max_neighbors=16,64;threshold=none,1.1", "--out", out) == 0
    assert len(list(out.glob("cell_*.json"))) == 8
    rows = (out / "summary.csv").read_text().splitlines()
    assert len(rows) == 9 and rows[0].startswith("cell,alpha,max_neighbors,threshold")
    assert (out / "run.cfg").exists()


def test_resolved_config_reproduces_run(workdir, tmp_path):
    cfg_text = (workdir / "f.sph.cfg").read_text()
    assert "seed=7" in cfg_text and "sbr=1:50" in cfg_text
    moved = cfg_text.replace(f"out={workdir / 'f.sph'}", f"out={tmp_path / 'again.sph'}")
    (tmp_path / "again.cfg").write_text(moved)
    assert run("simulate", "--config", tmp_path / "again.cfg") == 0
    assert (tmp_path / "again.sph").read_bytes() == (workdir / "f.sph").read_bytes()


def test_precedence_flag_over_env_over_file():
    file_values = cli.parse_config_text("seed = 5\nalpha=0.01\n# comment\n\nradius = 0.3")
    base = dict(input="x", out="y")
    cfg = cli.resolve_config("sample", base, file_values, {})
    assert cfg["seed"] == 5
    cfg = cli.resolve_config("sample", base, file_values, {"PPC_SEED": "9"})
    assert cfg["seed"] == 9
    cfg = cli.resolve_config("sample", dict(base, seed="11"), file_values, {"PPC_SEED": "9"})
    assert cfg["seed"] == 11
    cfg = cli.resolve_config("filter", base, file_values, {})
    assert (cfg["alpha"], cfg["radius"], cfg["max_neighbors"]) == (0.01, 0.3, 64)


def test_env_seed_reaches_simulation(tmp_path):
    assert run("simulate", *SIZE, "--out", tmp_path / "a.sph", env={"PPC_SEED": "21"}) == 0
    assert "seed=21" in (tmp_path / "a.sph.cfg").read_text()
    assert read_frame(tmp_path / "a.sph").seed == 21


def test_format_config_round_trips():
    cfg = cli.resolve_config("extract", dict(input="in.sph", out="o.ply", min_height="1.5", denoise="yes"),
                             None, {})
    text = cli.format_config("extract", cfg)
    assert cli.resolve_config("extract", {}, cli.parse_config_text(text), {}) == cfg


@pytest.mark.parametrize("argv", [
    ["simulate", "--sbr", "0:50", "--out", "{t}/x.sph"],
    ["simulate", "--width", "-3", "--out", "{t}/x.sph"],
    ["simulate", "--seed", "-1", "--out", "{t}/x.sph"],
    ["simulate"],
    ["sample", "--input", "{w}/c.ply", "--method", "random", "--out", "{t}/x.ply"],
    ["extract", "--input", "{w}/f.sph", "--mode", "median", "--out", "{t}/x.ply"],
    ["sweep", "--input", "{w}/f.sph", "--gt-depth", "{w}/gt.dpt", "--grid", "fwhm=1", "--out", "{t}/s"],
    ["filter", "--bogus", "1"],
])
def test_validation_errors_exit_2(argv, workdir, tmp_path, capsys):
    argv = [a.format(t=tmp_path, w=workdir) for a in argv]
    assert run(*argv) == cli.EXIT_INVALID
    assert capsys.readouterr().err


def test_config_file_errors_exit_2(tmp_path):
    (tmp_path / "bad.cfg").write_text("no_such_key = 1\n")
    assert run("simulate", "--config", tmp_path / "bad.cfg", "--out", tmp_path / "x.sph") == cli.EXIT_INVALID


@pytest.mark.parametrize("argv", [
    ["extract", "--input", "{t}/missing.sph", "--out", "{t}/x.ply"],
    ["simulate", "--config", "{t}/missing.cfg", "--out", "{t}/x.sph"],
    ["extract", "--input", "{w}/f.sph", "--out", "{t}/no/such/dir/x.ply"],
])
def test_io_errors_exit_3(argv, workdir, tmp_path, capsys):
    argv = [a.format(t=tmp_path, w=workdir) for a in argv]
    assert run(*argv) == cli.EXIT_IO
    assert "I/O error" in capsys.readouterr().err
