"""Synthetic scenes: procedural primitives, pinhole camera and depth/albedo maps.

Depth values are z-depth along the optical axis (the quantity a dataset
depth map stores); the simulator uses them directly as the time-of-flight
distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

NO_RETURN = -1.0
HIT_EPS = 1e-9

DEPTH_MAGIC = b"DPTHMAP1"
ALBEDO_MAGIC = b"ALBMAP01"


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SceneError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError("focal lengths must be positive")

    @classmethod
    def default(cls, width: int, height: int) -> "CameraIntrinsics":
        """fx = fy = width, principal point at the image centre (~53 deg HFOV)."""
        return cls(width, height, float(width), float(width), width / 2.0, height / 2.0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) ray directions through pixel centres, with z component 1."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (u - self.cx) / self.fx
        rays[..., 1] = (v - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


def project(point, intrinsics: CameraIntrinsics):
    """Project camera-frame points to ``(u, v, depth)``.

    Works on a single point or an ``(n, 3)`` array.
    """
    p = np.asarray(point, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(z <= 0):
        raise SceneError("cannot project a point with z <= 0")
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    if p.ndim == 1:
        return float(u), float(v), float(z)
    return np.stack([u, v, z], axis=-1)


def unproject(u, v, depth, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project`; accepts scalars or broadcastable arrays."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise SceneError("cannot unproject a non-positive depth")
    x = (np.asarray(u, dtype=np.float64) - intrinsics.cx) / intrinsics.fx * depth
    y = (np.asarray(v, dtype=np.float64) - intrinsics.cy) / intrinsics.fy * depth
    return np.stack(np.broadcast_arrays(x, y, depth), axis=-1)


# --- primitives ------------------------------------------------------------


def _check_albedo(albedo):
    if not (0.0 < albedo <= 1.0):
        raise SceneError(f"albedo must lie in (0, 1], got {albedo}")


@dataclass(frozen=True)
class Plane:
    """Rectangular patch (or infinite plane with ``size=(inf, inf)``).

    The in-plane axes are ``cross(up, normal)`` and ``cross(normal, that)``
    with ``up = +y`` (``+x`` when the normal is parallel to y).
    """

    center: tuple
    normal: tuple
    size: tuple = (math.inf, math.inf)
    albedo: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.shape != (3,) or np.linalg.norm(n) == 0:
            raise SceneError("plane normal must be a non-zero 3-vector")
        if len(self.size) != 2 or min(self.size) <= 0:
            raise SceneError(f"plane extents must be positive, got {self.size}")
        _check_albedo(self.albedo)

    def _basis(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        a = np.cross(ref, n)
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        return n, a, b

    def intersect(self, rays: np.ndarray) -> np.ndarray:
        n, a, b = self._basis()
        c = np.asarray(self.center, dtype=np.float64)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-15, (c @ n) / denom, np.inf)
            hit = rays * t[..., None] - c
            inside = (np.abs(hit @ a) <= self.size[0] / 2) & (np.abs(hit @ b) <= self.size[1] / 2)
        return np.where(inside & (t > HIT_EPS), t, np.inf)

    def residual(self, points: np.ndarray) -> np.ndarray:
        n, _, _ = self._basis()
        return np.abs((points - np.asarray(self.center)) @ n)


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    albedo: float = 1.0

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) <= 0:
            raise SceneError(f"box extents must be positive, got {self.size}")
        _check_albedo(self.albedo)

    def intersect(self, rays: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.center, dtype=np.float64) - np.asarray(self.size) / 2
        hi = lo + np.asarray(self.size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays
            t1 = lo * inv
            t2 = hi * inv
        # a zero direction component gives nan when the origin sits on a slab face
        t1 = np.nan_to_num(t1, nan=-np.inf)
        t2 = np.nan_to_num(t2, nan=np.inf)
        tnear = np.minimum(t1, t2).max(axis=-1)
        tfar = np.maximum(t1, t2).min(axis=-1)
        t = np.where(tnear > HIT_EPS, tnear, tfar)
        ok = (tnear <= tfar) & (t > HIT_EPS)
        return np.where(ok, t, np.inf)

    def residual(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - np.asarray(self.center)) - np.asarray(self.size) / 2
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return np.abs(outside + np.minimum(q.max(axis=-1), 0.0))


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneError(f"sphere radius must be positive, got {self.radius}")
        _check_albedo(self.albedo)

    def intersect(self, rays: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...i,...i->...", rays, rays)
        b = rays @ c
        disc = b * b - a * (c @ c - self.radius**2)
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (b - sq) / a
        t1 = (b + sq) / a
        t = np.where(t0 > HIT_EPS, t0, t1)
        return np.where((disc >= 0) & (t > HIT_EPS), t, np.inf)

    def residual(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius)


Primitive = Union[Plane, Box, Sphere]


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple = ()
    far_plane: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if self.far_plane is not None and not self.far_plane > 0:
            raise SceneError("far plane distance must be positive")


@dataclass
class DepthMap:
    intrinsics: CameraIntrinsics
    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.shape != self.intrinsics.shape:
            raise SceneError(f"depth grid {self.depth.shape} does not match camera {self.intrinsics.shape}")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class AlbedoMap:
    albedo: np.ndarray

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)


def render_scene(spec: SceneSpec, intrinsics: CameraIntrinsics) -> tuple[DepthMap, AlbedoMap]:
    """Ray-cast every pixel; the nearest positive hit wins, ties go to the
    primitive declared first."""
    rays = intrinsics.pixel_rays()
    best_t = np.full(intrinsics.shape, np.inf)
    albedo = np.full(intrinsics.shape, NO_RETURN)
    for prim in spec.primitives:
        t = prim.intersect(rays)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        albedo = np.where(closer, prim.albedo, albedo)
    hit = np.isfinite(best_t)
    # rays have unit z, so the ray parameter is the z-depth
    depth = np.where(hit, best_t, NO_RETURN)
    if spec.far_plane is not None:
        depth = np.where(hit, depth, spec.far_plane)
        albedo = np.where(hit, albedo, 1.0)
    return DepthMap(intrinsics, depth), AlbedoMap(albedo)


def standard_scene() -> SceneSpec:
    """Indoor-like room used by tests and benchmarks: back wall, floor,
    ceiling, side walls plus a few furniture-sized objects of varying albedo."""
    return SceneSpec(
        primitives=(
            Box(center=(-0.6, 0.55, 2.6), size=(0.8, 0.9, 0.6), albedo=0.6),
            Box(center=(0.9, 0.7, 3.4), size=(0.5, 0.6, 0.5), albedo=0.3),
            Sphere(center=(0.15, 0.2, 3.0), radius=0.35, albedo=0.8),
            Sphere(center=(-0.3, -0.5, 4.5), radius=0.25, albedo=0.15),
            Plane(center=(0.0, 0.0, 6.0), normal=(0.0, 0.0, -1.0), albedo=0.5),
            Plane(center=(0.0, 1.0, 0.0), normal=(0.0, -1.0, 0.0), albedo=0.4),
            Plane(center=(0.0, -1.5, 0.0), normal=(0.0, 1.0, 0.0), albedo=0.7),
            Plane(center=(-2.0, 0.0, 0.0), normal=(1.0, 0.0, 0.0), albedo=0.5),
            Plane(center=(2.0, 0.0, 0.0), normal=(-1.0, 0.0, 0.0), albedo=0.5),
        )
    )


# --- scene text format -----------------------------------------------------

_VECTOR_KEYS = {"center", "normal", "size"}


def _parse_vector(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def parse_scene(text: str) -> SceneSpec:
    """Parse the ``[section]`` / ``key = value`` scene grammar (see README)."""
    sections: list[tuple[str, dict, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip().lower(), {}, lineno))
            continue
        if "=" not in line or not sections:
            raise SceneError(f"line {lineno}: expected 'key = value' inside a section")
        key, value = (s.strip() for s in line.split("=", 1))
        sections[-1][1][key.lower()] = value

    prims = []
    far = None
    for kind, kv, lineno in sections:
        try:
            vals = {k: (_parse_vector(v) if k in _VECTOR_KEYS else v) for k, v in kv.items()}
            albedo = float(vals.pop("albedo", 1.0))
            if kind == "scene":
                bg = str(vals.get("background", "none")).lower()
                far = None if bg in ("none", "no_return") else float(bg)
            elif kind == "plane":
                size = vals.get("size", (math.inf, math.inf))
                prims.append(Plane(vals["center"], vals["normal"], tuple(size), albedo))
            elif kind == "box":
                prims.append(Box(vals["center"], vals["size"], albedo))
            elif kind == "sphere":
                prims.append(Sphere(vals["center"], float(vals["radius"]), albedo))
            else:
                raise SceneError(f"unknown section [{kind}]")
        except KeyError as e:
            raise SceneError(f"section [{kind}] at line {lineno} is missing {e}") from None
        except (TypeError, ValueError) as e:
            raise SceneError(f"section [{kind}] at line {lineno}: {e}") from None
    return SceneSpec(tuple(prims), far)


def format_scene(spec: SceneSpec) -> str:
    def vec(v):
        return " ".join(repr(float(x)) for x in v)

    lines = ["[scene]", f"background = {'none' if spec.far_plane is None else repr(spec.far_plane)}", ""]
    for p in spec.primitives:
        if isinstance(p, Plane):
            lines += ["[plane]", f"center = {vec(p.center)}", f"normal = {vec(p.normal)}", f"size = {vec(p.size)}"]
        elif isinstance(p, Box):
            lines += ["[box]", f"center = {vec(p.center)}", f"size = {vec(p.size)}"]
        else:
            lines += ["[sphere]", f"center = {vec(p.center)}", f"radius = {p.radius!r}"]
        lines += [f"albedo = {p.albedo!r}", ""]
    return "\n".join(lines)


def load_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text())


# --- map files -------------------------------------------------------------


def _write_grid(path, magic: bytes, grid: np.ndarray):
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def _read_grid(path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise SceneError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    h, w = struct.unpack_from("<II", data, 8)
    body = data[16:]
    if len(body) != 4 * h * w:
        raise SceneError(f"{path}: expected {h}x{w} values, file holds {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)


def write_depth_map(dmap: DepthMap, path):
    _write_grid(path, DEPTH_MAGIC, np.where(dmap.valid, dmap.depth, NO_RETURN))


def read_depth_map(path, intrinsics: CameraIntrinsics | None = None) -> DepthMap:
    grid = _read_grid(path, DEPTH_MAGIC)
    if intrinsics is None:
        intrinsics = CameraIntrinsics.default(grid.shape[1], grid.shape[0])
    return DepthMap(intrinsics, np.where(grid < 0, NO_RETURN, grid))


def write_albedo_map(amap: AlbedoMap, path):
    _write_grid(path, ALBEDO_MAGIC, amap.albedo)


def read_albedo_map(path) -> AlbedoMap:
    grid = _read_grid(path, ALBEDO_MAGIC)
    return AlbedoMap(np.where(grid < 0, NO_RETURN, grid))
