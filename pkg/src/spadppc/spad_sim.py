"""Forward model for SPAD timing histograms.

Expected photons per bin are

    lam[n] = eta * Phi * pulse_mass(n) + eta * b_gamma + b_d

with ``Phi = k * albedo / depth**2`` and ``k`` calibrated so that the mean
expected signal over the valid pixels of a frame equals a target photon
count. Counts are independent Poisson draws per bin.

Random streams
--------------
Every pixel owns a Philox-4x64-10 stream keyed by ``(seed, pixel_index)``
with the counter starting at zero (``pixel_index = row * width + col``).
All bins of a pixel are drawn from its stream in bin order, so a frame is a
pure function of its inputs and the seed, whatever the evaluation order or
worker count.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .scene import AlbedoMap, CameraIntrinsics, DepthMap

SPEED_OF_LIGHT = 299_792_458.0
FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
TRUNCATE_SIGMAS = 4.0

FRAME_MAGIC = b"SPADHST1"
REAL_FRAME_MAGIC = b"SPADHSF1"
_HEADER = struct.Struct("<8sIIIdddQ")


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class PulseModel:
    num_bins: int = 1024
    bin_width: float = 97e-12
    repetition_period: float = 100e-9
    fwhm: float = 350e-12

    def __post_init__(self):
        if self.num_bins < 1:
            raise SimulationError("num_bins must be >= 1")
        if not (self.bin_width > 0 and self.fwhm > 0):
            raise SimulationError("bin width and fwhm must be positive")
        # relative slack: 1024 * 97 ps is within rounding of 100 ns limits
        if self.num_bins * self.bin_width > self.repetition_period * (1 + 1e-12):
            raise SimulationError(
                f"{self.num_bins} bins of {self.bin_width:g}s exceed the repetition period {self.repetition_period:g}s"
            )

    @property
    def sigma(self) -> float:
        return self.fwhm * FWHM_TO_SIGMA

    @property
    def unambiguous_range(self) -> float:
        return SPEED_OF_LIGHT * self.repetition_period / 2.0

    @property
    def half_width_bins(self) -> int:
        """Number of bins on either side of the centre bin touched by the
        truncated pulse."""
        return int(math.ceil(TRUNCATE_SIGMAS * self.sigma / self.bin_width + 0.5))

    def pulse_masses(self, centre_bins) -> tuple[np.ndarray, np.ndarray]:
        """Binned, truncated, unit-area pulse for each fractional centre.

        Bin ``n`` integrates time ``[(n - 1/2) dt, (n + 1/2) dt)`` so a pulse
        centred at ``n * dt`` peaks in bin ``n``. Returns ``(bins, masses)``
        of shape ``(..., 2K + 1)``; bins are not wrapped.
        """
        c = np.asarray(centre_bins, dtype=np.float64)
        k = self.half_width_bins
        base = np.floor(c + 0.5).astype(np.int64)
        offsets = np.arange(-k, k + 1)
        bins = base[..., None] + offsets
        s = self.sigma / self.bin_width
        half = TRUNCATE_SIGMAS * s
        lo = np.clip(bins - 0.5 - c[..., None], -half, half)
        hi = np.clip(bins + 0.5 - c[..., None], -half, half)
        scale = 1.0 / (math.sqrt(2.0) * s)
        mass = 0.5 * (erf(hi * scale) - erf(lo * scale))
        mass /= mass.sum(axis=-1, keepdims=True)
        return bins, mass

    def kernel(self) -> np.ndarray:
        """Pulse binned at zero offset, centre at ``len // 2``. Outer taps
        that fall wholly beyond the truncation are trimmed."""
        mass = self.pulse_masses(0.0)[1]
        nz = np.flatnonzero(mass)
        trim = min(nz[0], len(mass) - 1 - nz[-1])
        return mass[trim:len(mass) - trim]

    def delay_bins(self, depth) -> np.ndarray:
        return 2.0 * np.asarray(depth, dtype=np.float64) / (SPEED_OF_LIGHT * self.bin_width)


@dataclass(frozen=True)
class SensorConfig:
    quantum_efficiency: float = 0.5
    dark_count: float = 0.0
    ambient_flux: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.quantum_efficiency < 1.0):
            raise SimulationError("quantum efficiency must lie in [0, 1)")
        if self.dark_count < 0 or self.ambient_flux < 0:
            raise SimulationError("dark count and ambient flux must be non-negative")

    def background_per_bin(self) -> float:
        return self.quantum_efficiency * self.ambient_flux + self.dark_count


@dataclass(frozen=True)
class SbrTarget:
    """Mean signal photons and background photons per pixel per acquisition.

    ``background == 0`` is accepted for clean (signal-only) simulations.
    """

    signal: float
    background: float

    def __post_init__(self):
        if not self.signal > 0:
            raise SimulationError(f"mean signal photons must be > 0, got {self.signal}")
        if self.background < 0:
            raise SimulationError(f"mean background photons must be >= 0, got {self.background}")

    @property
    def sbr(self) -> float:
        return self.signal / self.background if self.background > 0 else math.inf

    @classmethod
    def parse(cls, text: str) -> "SbrTarget":
        """Parse ``"S:B"`` (or ``"S-B"``)."""
        sep = ":" if ":" in text else "-"
        try:
            s, b = (float(x) for x in text.split(sep))
        except ValueError:
            raise SimulationError(f"SBR pair must look like 'S:B', got {text!r}") from None
        return cls(s, b)


# Benchmark levels: SBR -> (signal, background)
SBR_LEVELS = {
    0.1: SbrTarget(5, 50),
    0.05: SbrTarget(5, 100),
    0.02: SbrTarget(1, 50),
    0.01: SbrTarget(1, 100),
}


@dataclass(frozen=True)
class Calibration:
    """Result of :func:`calibrate`: ``Phi = scale * albedo / depth**2`` and the
    sensor with its ambient flux set to hit the background target."""

    scale: float
    sensor: SensorConfig


def calibrate(sbr: SbrTarget, pulse: PulseModel, depth: DepthMap, albedo: AlbedoMap,
              sensor: SensorConfig = SensorConfig()) -> Calibration:
    valid = depth.valid
    if not valid.any():
        raise SimulationError("cannot calibrate signal level: no pixel has a return")
    eta = sensor.quantum_efficiency
    if eta <= 0:
        raise SimulationError("calibration needs a positive quantum efficiency")
    d = depth.depth[valid]
    a = albedo.albedo[valid]
    mean_fall_off = float(np.mean(a / (d * d)))
    scale = sbr.signal / (eta * mean_fall_off)

    per_bin = sbr.background / pulse.num_bins
    if per_bin < sensor.dark_count:
        raise SimulationError(
            f"background target {sbr.background} photons is below the dark count alone "
            f"({sensor.dark_count * pulse.num_bins:g} per pixel)"
        )
    ambient = (per_bin - sensor.dark_count) / eta
    sensor = SensorConfig(eta, sensor.dark_count, ambient)
    return Calibration(scale, sensor)


def expected_flux(depth: float, albedo: float, pulse: PulseModel, sensor: SensorConfig,
                  scale: float) -> np.ndarray:
    """Expected photons per bin for one pixel.

    ``scale`` is the calibrated ``k`` in ``Phi = k * albedo / depth**2``; the
    background term comes from ``sensor`` (see :func:`calibrate`).
    """
    if not (0.0 < depth < pulse.unambiguous_range):
        raise SimulationError(f"depth {depth} m outside (0, {pulse.unambiguous_range:.3f}) m")
    if not (0.0 < albedo <= 1.0):
        raise SimulationError(f"albedo {albedo} outside (0, 1]")
    lam = np.full(pulse.num_bins, sensor.background_per_bin())
    phi = scale * albedo / (depth * depth)
    bins, mass = pulse.pulse_masses(pulse.delay_bins(depth))
    np.add.at(lam, bins % pulse.num_bins, sensor.quantum_efficiency * phi * mass)
    return lam


def pixel_rng(seed: int, pixel_index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, pixel_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def simulate_histogram(lam, rng: np.random.Generator) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise SimulationError("expected flux must be non-negative")
    return rng.poisson(lam).astype(np.uint32)


@dataclass
class HistogramFrame:
    """``counts`` has shape (H, W, N); uint32 for simulated frames, float64
    after denoising or decompression."""

    intrinsics: CameraIntrinsics
    pulse: PulseModel
    counts: np.ndarray
    seed: int = 0
    sensor: SensorConfig | None = None

    def __post_init__(self):
        h, w = self.intrinsics.shape
        if self.counts.shape != (h, w, self.pulse.num_bins):
            raise SimulationError(
                f"counts shape {self.counts.shape} does not match ({h}, {w}, {self.pulse.num_bins})"
            )

    @property
    def is_integer(self) -> bool:
        return np.issubdtype(self.counts.dtype, np.integer)


def flux_frame(depth: DepthMap, albedo: AlbedoMap, pulse: PulseModel, calib: Calibration,
               rows: slice = slice(None)) -> np.ndarray:
    """Expected flux for a block of rows, shape (rows, W, N)."""
    d = depth.depth[rows]
    a = albedo.albedo[rows]
    h, w = d.shape
    n = pulse.num_bins
    sensor = calib.sensor
    lam = np.full((h * w, n), sensor.background_per_bin())
    valid = (d > 0).ravel()
    if valid.any():
        dv = d.ravel()[valid]
        av = a.ravel()[valid]
        phi = calib.scale * av / (dv * dv)
        bins, mass = pulse.pulse_masses(pulse.delay_bins(dv))
        rows_idx = np.flatnonzero(valid)[:, None]
        np.add.at(lam, (np.broadcast_to(rows_idx, bins.shape), bins % n),
                  sensor.quantum_efficiency * phi[:, None] * mass)
    return lam.reshape(h, w, n)


def simulate_frame(depth: DepthMap, albedo: AlbedoMap, pulse: PulseModel, sensor: SensorConfig,
                   sbr: SbrTarget, seed: int, workers: int = 1) -> HistogramFrame:
    """Simulate one histogram per pixel.

    Pixels without a return get background-only flux. Output is identical
    for any ``workers`` value.
    """
    if albedo.albedo.shape != depth.depth.shape:
        raise SimulationError(f"albedo {albedo.albedo.shape} and depth {depth.depth.shape} grids differ")
    valid = depth.valid
    if np.any(depth.depth[valid] >= pulse.unambiguous_range):
        raise SimulationError(f"depths beyond the unambiguous range {pulse.unambiguous_range:.3f} m")
    if np.any(albedo.albedo[valid] <= 0) or np.any(albedo.albedo[valid] > 1):
        raise SimulationError("albedo outside (0, 1] at a pixel with a return")

    calib = calibrate(sbr, pulse, depth, albedo, sensor)
    h, w = depth.depth.shape
    counts = np.empty((h, w, pulse.num_bins), dtype=np.uint32)

    def run_rows(r0, r1):
        lam = flux_frame(depth, albedo, pulse, calib, slice(r0, r1))
        for r in range(r0, r1):
            for c in range(w):
                rng = pixel_rng(seed, r * w + c)
                counts[r, c] = rng.poisson(lam[r - r0, c])

    block = max(1, min(16, h // max(1, workers)))
    spans = [(r, min(h, r + block)) for r in range(0, h, block)]
    if workers <= 1:
        for span in spans:
            run_rows(*span)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda s: run_rows(*s), spans))
    return HistogramFrame(depth.intrinsics, pulse, counts, seed, calib.sensor)


# --- frame files -----------------------------------------------------------


def write_frame(frame: HistogramFrame, path):
    """SPADHST1 for integer frames; real-valued frames go to SPADHSF1 (same
    header, binary64 values)."""
    h, w = frame.intrinsics.shape
    p = frame.pulse
    if frame.is_integer:
        magic, body = FRAME_MAGIC, np.ascontiguousarray(frame.counts, dtype="<u4")
    else:
        magic, body = REAL_FRAME_MAGIC, np.ascontiguousarray(frame.counts, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, h, w, p.num_bins, p.bin_width, p.repetition_period, p.fwhm,
                             frame.seed & 0xFFFFFFFFFFFFFFFF))
        f.write(body.tobytes())


def read_frame(path, intrinsics: CameraIntrinsics | None = None) -> HistogramFrame:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise SimulationError(f"{path}: truncated header")
        magic, h, w, n, dt, period, fwhm, seed = _HEADER.unpack(head)
        if magic == FRAME_MAGIC:
            dtype = np.dtype("<u4")
        elif magic == REAL_FRAME_MAGIC:
            dtype = np.dtype("<f8")
        else:
            raise SimulationError(f"{path}: not a histogram frame (magic {magic!r})")
        counts = np.fromfile(f, dtype=dtype)
    if counts.size != h * w * n:
        raise SimulationError(f"{path}: expected {h * w * n} counts, found {counts.size}")
    if intrinsics is None:
        intrinsics = CameraIntrinsics.default(w, h)
    pulse = PulseModel(n, dt, period, fwhm)
    return HistogramFrame(intrinsics, pulse, counts.reshape(h, w, n).astype(dtype.newbyteorder("=")), seed)
