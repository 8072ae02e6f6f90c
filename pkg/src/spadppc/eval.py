"""Ground-truth-aware evaluation of point clouds, filters and samplers."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .ppc import ProbabilisticPointCloud
from .scene import DepthMap
from .spad_sim import SPEED_OF_LIGHT


def label_points(cloud: ProbabilisticPointCloud, gt_depth: DepthMap, bin_width: float,
                 eps_bins: float = 3.0) -> np.ndarray:
    """True for ground-truth points, False for noise.

    A point is ground truth when its depth is within ``eps_bins`` bins of the
    true depth at its source pixel; points from no-return pixels are noise.
    """
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    if not cloud.has_provenance:
        raise ValueError("every point needs pixel provenance to be labelled")
    u, v = cloud.pixels[:, 0], cloud.pixels[:, 1]
    h, w = gt_depth.depth.shape
    if u.max() >= w or v.max() >= h:
        raise ValueError("pixel provenance outside the ground-truth depth map")
    truth = gt_depth.depth[v, u]
    tol = eps_bins * bin_width * SPEED_OF_LIGHT / 2.0
    return (truth > 0) & (np.abs(cloud.positions[:, 2] - truth) <= tol)


@dataclass
class PrPoint:
    threshold: float
    precision: float
    recall: float
    kept: int
    kept_gt: int
    empty: bool = False


def filter_pr_curve(labels, scores, thresholds) -> list[PrPoint]:
    """Precision/recall of keeping ``score >= threshold``, thresholds sorted
    ascending. An empty kept set reports precision 1.0 with ``empty=True``."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    all_gt = int(labels.sum())
    out = []
    for t in np.sort(np.asarray(thresholds, dtype=np.float64)):
        keep = scores >= t
        kept = int(keep.sum())
        kept_gt = int((keep & labels).sum())
        prec = kept_gt / kept if kept else 1.0
        rec = kept_gt / all_gt if all_gt else 1.0
        out.append(PrPoint(float(t), prec, rec, kept, kept_gt, kept == 0))
    return out


def precision_at_recall(labels, scores, recall: float) -> float:
    """Precision of the strictest score threshold that still keeps at least
    ``recall`` of the ground-truth points."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_gt = int(labels.sum())
    if n_gt == 0:
        return math.nan
    # keep the top-scoring points; a threshold keeps every point tied with it
    gt_scores = np.sort(scores[labels])[::-1]
    need = int(math.ceil(recall * n_gt - 1e-12))
    t = gt_scores[max(need, 1) - 1]
    keep = scores >= t
    return float((keep & labels).sum() / keep.sum())


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    gt_frac: np.ndarray
    noise_frac: np.ndarray

    def mode(self, which: str = "gt") -> float:
        frac = self.gt_frac if which == "gt" else self.noise_frac
        k = int(np.argmax(frac))
        return float(0.5 * (self.edges[k] + self.edges[k + 1]))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["bin_left", "bin_right", "gt_frac", "noise_frac"])
            for i in range(len(self.gt_frac)):
                wr.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                             repr(float(self.gt_frac[i])), repr(float(self.noise_frac[i]))])


def score_histogram(scores, labels, bins: int = 50, value_range: tuple | None = None) -> ScoreHistogram:
    """Per-class normalised histograms; a class with no points is all zeros."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if value_range is None:
        hi = float(scores.max()) if len(scores) else 1.0
        value_range = (0.0, hi if hi > 0 else 1.0)
    edges = np.linspace(value_range[0], value_range[1], bins + 1)

    def frac(x):
        c, _ = np.histogram(x, bins=edges)
        return c / c.sum() if c.sum() else np.zeros(bins)

    return ScoreHistogram(edges, frac(scores[labels]), frac(scores[~labels]))


def sampling_purity(keypoints, labels) -> float:
    keypoints = np.asarray(keypoints, dtype=np.int64)
    if len(keypoints) == 0:
        return math.nan
    return float(np.asarray(labels, dtype=bool)[keypoints].mean())


def depth_rmse(cloud: ProbabilisticPointCloud, gt_depth: DepthMap, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return math.nan
    u, v = cloud.pixels[mask, 0], cloud.pixels[mask, 1]
    err = cloud.positions[mask, 2] - gt_depth.depth[v, u]
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class FilterCounts:
    gt_kept: int
    gt_removed: int
    noise_kept: int
    noise_removed: int

    @property
    def precision(self) -> float:
        kept = self.gt_kept + self.noise_kept
        return self.gt_kept / kept if kept else 1.0

    @property
    def recall(self) -> float:
        gt = self.gt_kept + self.gt_removed
        return self.gt_kept / gt if gt else 1.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def filter_counts(labels, keep) -> FilterCounts:
    labels = np.asarray(labels, dtype=bool)
    keep = np.asarray(keep, dtype=bool)
    return FilterCounts(int((labels & keep).sum()), int((labels & ~keep).sum()),
                        int((~labels & keep).sum()), int((~labels & ~keep).sum()))


@dataclass
class EvalReport:
    num_points: int
    counts: FilterCounts
    precision: float
    recall: float
    f1: float
    empty_kept: bool
    depth_rmse: float
    purity: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histograms"] = {k: {"edges": h.edges.tolist(), "gt_frac": h.gt_frac.tolist(),
                               "noise_frac": h.noise_frac.tolist()} for k, h in self.histograms.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["counts"] = FilterCounts(**d["counts"])
        d["histograms"] = {k: ScoreHistogram(np.array(h["edges"]), np.array(h["gt_frac"]),
                                             np.array(h["noise_frac"])) for k, h in d["histograms"].items()}
        return cls(**d)

    def to_json(self) -> str:
        # repr-exact floats; nan/inf spelled as JSON extensions Python reads back
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def make_report(cloud, labels, keep, *, depth_rmse_value=math.nan, purity=None, histograms=None,
                timings_ms=None, params=None) -> EvalReport:
    c = filter_counts(labels, keep)
    return EvalReport(len(cloud), c, c.precision, c.recall, c.f1, c.gt_kept + c.noise_kept == 0,
                      depth_rmse_value, dict(purity or {}), dict(histograms or {}),
                      dict(timings_ms or {}), dict(params or {}))


def time_stage(fn, repetitions: int = 5):
    """Median wall-clock milliseconds of ``fn()`` and its last result."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    times = []
    result = None
    for _ in range(repetitions):
        t0 = time.perf_counter()
        result = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times)), result


def benchmark(frame, npd_params, fpps_params, repetitions: int = 5, mode: str = "matched",
              min_height=None) -> dict:
    """Median stage timings (ms) for extract, NPD filtering, FPPS and FPS.

    ``overhead_pct`` is NPD filtering plus FPPS relative to extraction.
    One untimed warm-up pass compiles the jitted kernels first.
    """
    from .histogram_proc import estimate_frame
    from .ppc import build_ppc
    from .spatial_ops import fps, fpps, npd_filter

    if repetitions < 3:
        raise ValueError("benchmark needs at least 3 repetitions")

    def extract():
        return build_ppc(estimate_frame(frame, mode, min_height), frame.intrinsics)

    cloud = extract()
    filtered = npd_filter(cloud, npd_params)
    count = min(fpps_params.count, len(filtered))
    if count:
        fpps(filtered, type(fpps_params)(fpps_params.beta, count))
        fps(filtered, count)

    t_extract, cloud = time_stage(extract, repetitions)
    t_npd, filtered = time_stage(lambda: npd_filter(cloud, npd_params), repetitions)
    count = min(fpps_params.count, len(filtered))
    if count:
        fp = type(fpps_params)(fpps_params.beta, count)
        t_fpps, _ = time_stage(lambda: fpps(filtered, fp), repetitions)
        t_fps, _ = time_stage(lambda: fps(filtered, count), repetitions)
    else:
        t_fpps = t_fps = 0.0
    return {
        "num_points": len(cloud),
        "num_filtered": len(filtered),
        "extract_ms": t_extract,
        "npd_ms": t_npd,
        "fpps_ms": t_fpps,
        "fps_ms": t_fps,
        "overhead_pct": 100.0 * (t_npd + t_fpps) / t_extract if t_extract > 0 else 0.0,
    }
