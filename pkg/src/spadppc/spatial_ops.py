"""Fixed-radius neighbourhoods, NPD scoring/filtering and keypoint sampling.

Neighbour search runs on a uniform grid (see :class:`SpatialIndex`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numba as nb
import numpy as np

from .ppc import ProbabilisticPointCloud

# numba falls back to another threading layer on its own; the notice is noise
warnings.filterwarnings("ignore", message="The TBB threading layer", category=nb.NumbaWarning)


@dataclass(frozen=True)
class NpdParams:
    max_neighbors: int = 64
    radius: float = 0.2
    alpha: float = 0.003
    include_self: bool = True

    def __post_init__(self):
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors (L) must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


@dataclass(frozen=True)
class FppsParams:
    beta: float = 0.01
    count: int = 1024

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ValueError("beta must lie in [0, 1]")
        if self.count < 1:
            raise ValueError("count must be >= 1")


class SpatialIndex:
    """Uniform grid over a point set, built for queries of ``radius``.

    The cell edge is ``radius / subdivisions``. Points are stored sorted by
    linear cell id (x fastest, then y, then z; point index breaks ties), so
    a run of cells along x is one contiguous slice of the sorted arrays.
    ``row_first[k]`` is the first sorted slot of the k-th (y, z) row of
    cells; the x position inside a row is found by binary search.
    """

    def __init__(self, points, radius: float, subdivisions: int = 2):
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if not radius > 0:
            raise ValueError("radius must be positive")
        if subdivisions < 1:
            raise ValueError("subdivisions must be >= 1")
        self.points = pts
        self.radius = float(radius)
        self.cell = self.radius / subdivisions
        self.origin = pts.min(axis=0) if len(pts) else np.zeros(3)
        coords = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        self.dims = coords.max(axis=0) + 1 if len(pts) else np.ones(3, dtype=np.int64)
        ids = _linear_ids(coords, self.dims)
        self.order = np.argsort(ids, kind="stable")
        self.sorted_ids = ids[self.order]
        self.sorted_points = np.ascontiguousarray(pts[self.order])
        nrows = int(self.dims[1] * self.dims[2])
        self.row_first = np.zeros(nrows + 1, dtype=np.int64)
        np.cumsum(np.bincount(ids // self.dims[0], minlength=nrows), out=self.row_first[1:])

    def __len__(self):
        return len(self.points)

    def _args(self):
        return (self.cell, self.origin, self.dims, self.row_first, self.sorted_ids, self.sorted_points, self.order)


def _linear_ids(coords, dims):
    return coords[:, 0] + dims[0] * (coords[:, 1] + dims[1] * coords[:, 2])


@nb.njit(cache=True)
def _lower_bound(ids, lo, hi, cid):
    while lo < hi:
        mid = (lo + hi) >> 1
        if ids[mid] < cid:
            lo = mid + 1
        else:
            hi = mid
    return lo


@nb.njit(cache=True)
def _scan(a, b, px, py, pz, r2, skip, spts, order, buf_d2, buf_idx, n):
    for t in range(a, b):
        dx = spts[t, 0] - px
        dy = spts[t, 1] - py
        dz = spts[t, 2] - pz
        d2 = dx * dx + dy * dy + dz * dz
        if d2 <= r2 and t != skip:
            if n == buf_d2.size:
                return -1
            buf_d2[n] = d2
            buf_idx[n] = order[t]
            n += 1
    return n


@nb.njit(cache=True)
def _collect(px, py, pz, r2, limit, skip, cell, origin, dims, row_first, sorted_ids, spts, order,
             buf_d2, buf_idx):
    """Gather points within sqrt(r2) of p, ring by ring (Chebyshev distance
    in cells), until the ``limit`` nearest are certain to be among them.

    Returns the number gathered, or -1 when the buffers are too small.
    ``skip`` is a sorted slot to leave out (-1 for none).
    """
    reach = math.sqrt(r2)
    fx = (px - origin[0]) / cell
    fy = (py - origin[1]) / cell
    fz = (pz - origin[2]) / cell
    c0 = int(math.floor(fx))
    c1 = int(math.floor(fy))
    c2 = int(math.floor(fz))
    # cells a point within reach can have been binned into; the cell index
    # is monotone in the coordinate, so padding the reach covers rounding
    pad = reach * (1.0 + 1e-12)
    lo0 = max(0, int(math.floor((px - pad - origin[0]) / cell)))
    hi0 = min(dims[0] - 1, int(math.floor((px + pad - origin[0]) / cell)))
    lo1 = max(0, int(math.floor((py - pad - origin[1]) / cell)))
    hi1 = min(dims[1] - 1, int(math.floor((py + pad - origin[1]) / cell)))
    lo2 = max(0, int(math.floor((pz - pad - origin[2]) / cell)))
    hi2 = min(dims[2] - 1, int(math.floor((pz + pad - origin[2]) / cell)))
    if lo0 > hi0 or lo1 > hi1 or lo2 > hi2:
        return 0
    qmax = max(c0 - lo0, hi0 - c0, c1 - lo1, hi1 - c1, c2 - lo2, hi2 - c2, 0)
    # distance from p to the nearest wall of its own cell
    wall = min(fx - c0, c0 + 1 - fx, fy - c1, c1 + 1 - fy, fz - c2, c2 + 1 - fz) * cell
    nx = dims[0]
    ny = dims[1]
    n = 0
    for q in range(qmax + 1):
        xa = max(lo0, c0 - q)
        xb = min(hi0, c0 + q)
        if xa <= xb:
            for k2 in range(max(lo2, c2 - q), min(hi2, c2 + q) + 1):
                for k1 in range(max(lo1, c1 - q), min(hi1, c1 + q) + 1):
                    r = k1 + ny * k2
                    ra = row_first[r]
                    rb = row_first[r + 1]
                    if ra == rb:
                        continue
                    base = nx * r
                    if abs(k2 - c2) == q or abs(k1 - c1) == q:
                        a = _lower_bound(sorted_ids, ra, rb, base + xa)
                        b = _lower_bound(sorted_ids, a, rb, base + xb + 1)
                        n = _scan(a, b, px, py, pz, r2, skip, spts, order, buf_d2, buf_idx, n)
                    else:
                        # only the two end cells of this row are new in ring q
                        if c0 - q >= lo0:
                            a = _lower_bound(sorted_ids, ra, rb, base + c0 - q)
                            b = _lower_bound(sorted_ids, a, rb, base + c0 - q + 1)
                            n = _scan(a, b, px, py, pz, r2, skip, spts, order, buf_d2, buf_idx, n)
                        if c0 + q <= hi0 and n >= 0:
                            a = _lower_bound(sorted_ids, ra, rb, base + c0 + q)
                            b = _lower_bound(sorted_ids, a, rb, base + c0 + q + 1)
                            n = _scan(a, b, px, py, pz, r2, skip, spts, order, buf_d2, buf_idx, n)
                    if n < 0:
                        return -1
        # every point outside the scanned cube is at least this far away
        # (shaved so binning round-off cannot break the bound)
        settled = (q * cell + wall) * (1.0 - 1e-9)
        if n >= limit and q < qmax and settled < reach:
            s2 = settled * settled
            inside = 0
            for m in range(n):
                if buf_d2[m] < s2:
                    inside += 1
            if inside >= limit:
                return n
    return n


_BUCKETS = 128


@nb.njit(cache=True)
def _select(buf_d2, buf_idx, n, limit, out, bound2):
    """Write the ``limit`` nearest of the n gathered points into ``out``
    (ties go to lower indices); returns how many were written.

    Every gathered distance must be <= ``bound2``. Distances are bucketed
    on [0, bound2]; buckets below the one holding the cut are taken whole
    and only that bucket is sorted.
    """
    if n <= limit:
        for m in range(n):
            out[m] = buf_idx[m]
        return n
    counts = np.zeros(_BUCKETS + 1, dtype=np.int64)
    scale = _BUCKETS / bound2 if bound2 > 0 else 0.0
    for m in range(n):
        b = min(int(buf_d2[m] * scale), _BUCKETS)
        counts[b] += 1
    acc = 0
    cut_bucket = 0
    for b in range(_BUCKETS + 1):
        if acc + counts[b] >= limit:
            cut_bucket = b
            break
        acc += counts[b]
    k = 0
    edge_d2 = np.empty(counts[cut_bucket])
    edge_idx = np.empty(counts[cut_bucket], dtype=np.int64)
    e = 0
    for m in range(n):
        b = min(int(buf_d2[m] * scale), _BUCKETS)
        if b < cut_bucket:
            out[k] = buf_idx[m]
            k += 1
        elif b == cut_bucket:
            edge_d2[e] = buf_d2[m]
            edge_idx[e] = buf_idx[m]
            e += 1
    # order the boundary bucket by (distance, index)
    by_idx = np.argsort(edge_idx)
    by_d = np.argsort(edge_d2[by_idx], kind="mergesort")
    for m in range(limit - k):
        out[k + m] = edge_idx[by_idx[by_d[m]]]
    return limit


def _gather(index: SpatialIndex, p, r2, limit, skip=-1):
    size = 256
    while True:
        d2 = np.empty(size)
        idx = np.empty(size, dtype=np.int64)
        n = _collect(p[0], p[1], p[2], r2, limit, skip, *index._args(), d2, idx)
        if n >= 0:
            return d2[:n], idx[:n]
        size *= 4


def ball_query(index: SpatialIndex, p, radius: float, max_neighbors: int) -> np.ndarray:
    """Indices of up to ``max_neighbors`` points within ``radius`` of ``p``:
    the nearest ones, ties broken by lower index, ordered by distance."""
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64)
    p = np.asarray(p, dtype=np.float64)
    d2, idx = _gather(index, p, radius * radius, max_neighbors)
    out = np.empty(max_neighbors, dtype=np.int64)
    k = _select(d2, idx, len(d2), max_neighbors, out, radius * radius)
    sel = out[:k]
    dist = dict(zip(idx.tolist(), d2.tolist()))
    return np.array(sorted(sel.tolist(), key=lambda i: (dist[i], i)), dtype=np.int64)


@nb.njit(cache=True, parallel=True)
def _npd_kernel(prob, r2, limit, include_self, nchunks, cell, origin, dims, row_first, sorted_ids, spts, order,
                scores):
    npts = spts.shape[0]
    per = (npts + nchunks - 1) // nchunks
    for c in nb.prange(nchunks):
        size = 1024
        buf_d2 = np.empty(size)
        buf_idx = np.empty(size, dtype=np.int64)
        out = np.empty(limit, dtype=np.int64)
        for s in range(c * per, min(npts, (c + 1) * per)):
            skip = -1 if include_self else s
            n = -1
            while n < 0:
                n = _collect(spts[s, 0], spts[s, 1], spts[s, 2], r2, limit, skip, cell, origin, dims,
                             row_first, sorted_ids, spts, order, buf_d2, buf_idx)
                if n < 0:
                    size *= 4
                    buf_d2 = np.empty(size)
                    buf_idx = np.empty(size, dtype=np.int64)
            k = _select(buf_d2, buf_idx, n, limit, out, r2)
            total = 0.0
            for m in range(k):
                total += prob[out[m]]
            scores[order[s]] = total / limit


def npd_scores(cloud: ProbabilisticPointCloud, params: NpdParams = NpdParams(),
               index: SpatialIndex | None = None) -> np.ndarray:
    """Sum of neighbour probabilities over the (up to L) nearest points
    within ``r``, divided by L. Sparse points are penalised because the
    divisor stays L."""
    n = len(cloud)
    scores = np.zeros(n)
    if n == 0:
        return scores
    if index is None:
        index = SpatialIndex(cloud.positions, params.radius)
    nchunks = max(1, nb.get_num_threads())
    _npd_kernel(cloud.probability, params.radius ** 2, params.max_neighbors, params.include_self, nchunks,
                *index._args(), scores)
    return scores


def npd_filter(cloud: ProbabilisticPointCloud, params: NpdParams = NpdParams(),
               scores: np.ndarray | None = None) -> ProbabilisticPointCloud:
    """Keep points scoring at least ``alpha``, preserving order."""
    if scores is None:
        scores = npd_scores(cloud, params)
    return cloud.subset(np.flatnonzero(scores >= params.alpha))


# nnan/ninf only let min/max reductions vectorise; distances stay bit-exact
@nb.njit(cache=True, fastmath={"nnan", "ninf"})
def _fps_kernel(xs, ys, zs, count, start, mind):
    n = xs.size
    out = np.empty(count, dtype=np.int64)
    mind[:] = np.inf
    cur = start
    for k in range(count):
        out[k] = cur
        cx = xs[cur]
        cy = ys[cur]
        cz = zs[cur]
        best = 0.0
        for i in range(n):
            dx = xs[i] - cx
            dy = ys[i] - cy
            dz = zs[i] - cz
            d = min(mind[i], dx * dx + dy * dy + dz * dz)
            mind[i] = d
            best = max(best, d)
        for i in range(n):
            if mind[i] == best:
                cur = i
                break
    return out


def fps(points, count: int, start: int | None = 0, seed: int | None = None) -> np.ndarray:
    """Greedy max-min sampling.

    Each step picks the point farthest (squared Euclidean) from everything
    selected so far, lowest index on ties. ``start=None`` draws the first
    point from ``seed``.
    """
    if isinstance(points, ProbabilisticPointCloud):
        points = points.positions
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if count < 0 or count > n:
        raise ValueError(f"cannot sample {count} points from a cloud of {n}")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    xs, ys, zs = (np.ascontiguousarray(pts[:, i]) for i in range(3))
    return _fps_kernel(xs, ys, zs, count, start, np.empty(n))


def fpps(cloud: ProbabilisticPointCloud, params: FppsParams = FppsParams(), start: int | None = 0,
         seed: int | None = None) -> np.ndarray:
    """Farthest probable point sampling.

    FPS restricted to points with probability >= beta. ``start`` indexes
    the candidate set (0 = lowest-index candidate). When fewer than
    ``count`` candidates exist the rest is filled with non-candidates in
    descending probability (lower index first on ties). Indices refer to
    the full cloud, which is left untouched.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    count = params.count
    if count > n:
        raise ValueError(f"cannot sample {count} points from a cloud of {n}")
    cand = np.flatnonzero(cloud.probability >= params.beta)
    if len(cand) >= count:
        return cand[fps(cloud.positions[cand], count, start, seed)]
    picked = cand[fps(cloud.positions[cand], len(cand), start, seed)] if len(cand) else cand
    rest = np.flatnonzero(cloud.probability < params.beta)
    rest = rest[np.lexsort((rest, -cloud.probability[rest]))]
    return np.concatenate([picked, rest[:count - len(cand)]]).astype(np.int64)
