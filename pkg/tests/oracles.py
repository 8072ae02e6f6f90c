"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def matched_filter_ref(h, kernel, circular=True):
    """out[n] = sum_j kernel[j] * h[n + j - K], zero-clamped; explicit loops."""
    h = [float(x) for x in h]
    kernel = [float(x) for x in kernel]
    n_bins, half = len(h), len(kernel) // 2
    out = []
    for n in range(n_bins):
        acc = 0.0
        for j, kj in enumerate(kernel):
            i = n + j - half
            if circular:
                acc += kj * h[i % n_bins]
            elif 0 <= i < n_bins:
                acc += kj * h[i]
        out.append(max(acc, 0.0))
    return np.array(out)


def sq_dist(points, p):
    d = points - np.asarray(p, dtype=np.float64)
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


def ball_query_ref(points, p, radius, max_neighbors):
    """Scan every point; the max_neighbors nearest within radius, ties to
    the lower index, ordered by (distance, index)."""
    d2 = sq_dist(points, p)
    inside = [i for i in range(len(points)) if d2[i] <= radius * radius]
    inside.sort(key=lambda i: (d2[i], i))
    return np.array(inside[:max_neighbors], dtype=np.int64)


def fps_ref(points, count, start=0):
    """Recompute every candidate's distance to the whole selected set at each
    step (no incremental bookkeeping)."""
    points = np.asarray(points, dtype=np.float64)
    chosen = [start]
    while len(chosen) < count:
        dmin = np.min(np.stack([sq_dist(points, points[c]) for c in chosen]), axis=0)
        chosen.append(int(np.argmax(dmin)))
    return np.array(chosen, dtype=np.int64)


def npd_ref(points, prob, radius, max_neighbors):
    return np.array([prob[ball_query_ref(points, p, radius, max_neighbors)].sum() / max_neighbors
                     for p in points])
