"""From timing histograms to per-pixel (depth, probability) estimates."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .spad_sim import SPEED_OF_LIGHT, HistogramFrame, PulseModel

FOURIER_MAGIC = b"SPADFOU1"
DEFAULT_THRESHOLD = 1.1


class ProcessingError(ValueError):
    pass


def matched_filter(h, kernel, circular: bool = True) -> np.ndarray:
    """Correlate histogram(s) with a centred pulse kernel along the last axis.

    ``out[n] = sum_k kernel[K + k] * h[n + k]`` for ``k`` in ``[-K, K]``,
    indices taken modulo ``N`` when ``circular`` (the laser period wraps),
    zero-padded otherwise. Works on a single histogram or any (..., N) stack.
    """
    h = np.asarray(h, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    n = h.shape[-1]
    if kernel.ndim != 1 or kernel.size % 2 == 0:
        raise ProcessingError("kernel must be 1-D with odd length (centred)")
    if kernel.size > n:
        raise ProcessingError(f"kernel of {kernel.size} taps is longer than the {n}-bin histogram")
    mode = "wrap" if circular else "constant"
    out = ndimage.correlate1d(h, kernel, axis=-1, mode=mode, cval=0.0)
    # rounding can push an all-zero neighbourhood a hair below zero
    return np.maximum(out, 0.0)


def detect_peak(f, min_height: float = 0.0):
    """Return ``(m, peak_height, valid)``; ``m`` is the lowest index reaching
    the maximum and ``valid`` means ``peak_height > min_height``."""
    if min_height < 0:
        raise ProcessingError("min_height must be non-negative")
    f = np.asarray(f)
    m = np.argmax(f, axis=-1)
    height = np.take_along_axis(f, m[..., None], axis=-1)[..., 0] if f.ndim > 1 else f[m]
    valid = height > min_height
    if f.ndim == 1:
        return int(m), float(height), bool(valid)
    return m, height, valid


def depth_from_bin(m, bin_width: float):
    """Bin index to metres: ``(dt * c / 2) * m``."""
    return (bin_width * SPEED_OF_LIGHT / 2.0) * m


def point_probability(f, m):
    """Peak mass over total mass. Undefined (nan) where the total is zero."""
    f = np.asarray(f, dtype=np.float64)
    total = f.sum(axis=-1)
    if f.ndim == 1:
        if total <= 0:
            raise ProcessingError("probability undefined for an empty histogram")
        return float(f[m] / total)
    peak = np.take_along_axis(f, np.asarray(m)[..., None], axis=-1)[..., 0]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, peak / np.where(total > 0, total, 1.0), np.nan)


def matched_template(pulse: PulseModel) -> np.ndarray:
    """The binned pulse scaled to a unit peak, so one isolated photon gives
    a matched response of height 1 and heights read as photon counts."""
    k = pulse.kernel()
    return k / k.max()


def default_min_height(pulse: PulseModel, kernel=None) -> float:
    """Just above the response of one isolated photon."""
    k = matched_template(pulse) if kernel is None else np.asarray(kernel, dtype=np.float64)
    return float(k.max()) + 1e-9


@dataclass(frozen=True)
class PixelEstimate:
    depth: float
    peak_bin: int
    peak_height: float
    probability: float
    valid: bool


@dataclass
class FrameEstimates:
    """Per-pixel estimates for a whole frame, as (H, W) arrays."""

    depth: np.ndarray
    peak_bin: np.ndarray
    peak_height: np.ndarray
    probability: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.depth.shape

    def __getitem__(self, idx) -> PixelEstimate:
        return PixelEstimate(float(self.depth[idx]), int(self.peak_bin[idx]), float(self.peak_height[idx]),
                             float(self.probability[idx]), bool(self.valid[idx]))


def estimate_pixel(h, pulse: PulseModel, mode: str = "matched", min_height: float | None = None,
                   kernel=None) -> PixelEstimate:
    if min_height is None:
        min_height = default_min_height(pulse, kernel) if mode == "matched" else 0.0
    f = _domain(np.asarray(h), pulse, mode, kernel)
    m, height, valid = detect_peak(f, min_height)
    prob = float(f[m] / f.sum()) if valid else 0.0
    return PixelEstimate(float(depth_from_bin(m, pulse.bin_width)), m, height, prob, valid)


def _domain(h, pulse, mode, kernel=None):
    if mode == "raw":
        return np.asarray(h, dtype=np.float64)
    if mode == "matched":
        return matched_filter(h, matched_template(pulse) if kernel is None else kernel)
    raise ProcessingError(f"unknown mode {mode!r}; expected 'raw' or 'matched'")


def estimate_frame(frame: HistogramFrame, mode: str = "matched", min_height: float | None = None,
                   kernel=None, block_rows: int = 32) -> FrameEstimates:
    """Vectorised :func:`estimate_pixel` over every pixel, processed in row
    blocks to bound memory. Invalid pixels carry probability 0."""
    pulse = frame.pulse
    if min_height is None:
        min_height = default_min_height(pulse, kernel) if mode == "matched" else 0.0
    if min_height < 0:
        raise ProcessingError("min_height must be non-negative")
    h, w = frame.intrinsics.shape
    peak_bin = np.zeros((h, w), dtype=np.int64)
    height = np.zeros((h, w))
    prob = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    for r0 in range(0, h, block_rows):
        rows = slice(r0, min(h, r0 + block_rows))
        f = _domain(frame.counts[rows], pulse, mode, kernel)
        m = np.argmax(f, axis=-1)
        pk = np.take_along_axis(f, m[..., None], axis=-1)[..., 0]
        total = f.sum(axis=-1)
        ok = (pk > min_height) & (total > 0)
        peak_bin[rows] = m
        height[rows] = pk
        prob[rows] = np.where(ok, pk / np.where(total > 0, total, 1.0), 0.0)
        valid[rows] = ok
    depth = depth_from_bin(peak_bin, pulse.bin_width)
    return FrameEstimates(depth, peak_bin, height, prob, valid)


def threshold_baseline(estimates: FrameEstimates, threshold: float = DEFAULT_THRESHOLD) -> FrameEstimates:
    """Invalidate estimates whose peak height is at or below ``threshold``."""
    if threshold < 0:
        raise ProcessingError("threshold must be non-negative")
    keep = estimates.valid & (estimates.peak_height > threshold)
    return replace(estimates, valid=keep, probability=np.where(keep, estimates.probability, 0.0))


def gaussian_kernel_2d(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ProcessingError(f"spatial kernel size must be odd, got {size}")
    if not sigma > 0:
        raise ProcessingError("sigma must be positive")
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def spatial_gaussian_denoise(frame: HistogramFrame, size: int = 5, sigma: float = 1.0) -> HistogramFrame:
    """Blur every time bin across pixels with a normalised Gaussian.

    Near the border the kernel is renormalised over the pixels that exist,
    so a constant frame stays constant. Returns a float64 frame.
    """
    kern = gaussian_kernel_2d(size, sigma)
    h, w = frame.intrinsics.shape
    if size > min(h, w):
        raise ProcessingError(f"kernel size {size} exceeds the {h}x{w} frame")
    k3 = kern[:, :, None]
    data = frame.counts.astype(np.float64)
    blurred = ndimage.correlate(data, k3, mode="constant", cval=0.0)
    norm = ndimage.correlate(np.ones((h, w)), kern, mode="constant", cval=0.0)
    return replace(frame, counts=blurred / norm[:, :, None])


@dataclass
class FourierCode:
    """Lowest ``k`` rFFT coefficients of each histogram, shape (..., k)."""

    k: int
    num_bins: int
    coefficients: np.ndarray


def _check_k(k, n):
    if not (1 <= k <= n // 2 + 1):
        raise ProcessingError(f"k={k} outside [1, {n // 2 + 1}] for {n} bins")


def compress_fourier(h, k: int = 32) -> FourierCode:
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[-1]
    _check_k(k, n)
    return FourierCode(k, n, np.fft.rfft(h, axis=-1)[..., :k])


def decompress_fourier(code: FourierCode, num_bins: int | None = None) -> np.ndarray:
    n = code.num_bins if num_bins is None else num_bins
    _check_k(code.k, n)
    spec = np.zeros(code.coefficients.shape[:-1] + (n // 2 + 1,), dtype=np.complex128)
    spec[..., :code.k] = code.coefficients
    return np.maximum(np.fft.irfft(spec, n=n, axis=-1), 0.0)


def write_fourier(code: FourierCode, path):
    c = code.coefficients
    if c.ndim != 3:
        raise ProcessingError("expected a (H, W, k) coefficient grid")
    h, w, k = c.shape
    pairs = np.empty((h, w, k, 2), dtype="<f4")
    pairs[..., 0] = c.real
    pairs[..., 1] = c.imag
    with open(path, "wb") as f:
        f.write(FOURIER_MAGIC + struct.pack("<IIII", h, w, code.num_bins, k))
        f.write(pairs.tobytes())


def read_fourier(path) -> FourierCode:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != FOURIER_MAGIC:
            raise ProcessingError(f"{path}: not a Fourier code file (magic {magic!r})")
        head = f.read(16)
        if len(head) < 16:
            raise ProcessingError(f"{path}: truncated header")
        h, w, n, k = struct.unpack("<IIII", head)
        pairs = np.fromfile(f, dtype="<f4")
    if pairs.size != h * w * k * 2:
        raise ProcessingError(f"{path}: expected {h * w * k} coefficients, found {pairs.size // 2}")
    pairs = pairs.reshape(h, w, k, 2).astype(np.float64)
    return FourierCode(k, n, pairs[..., 0] + 1j * pairs[..., 1])
