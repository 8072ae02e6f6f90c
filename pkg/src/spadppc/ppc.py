"""Probabilistic point clouds and their PLY encoding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .histogram_proc import FrameEstimates
from .scene import CameraIntrinsics, unproject


class PlyError(ValueError):
    pass


@dataclass
class ProbabilisticPointCloud:
    """``positions`` (n, 3) metres, ``probability`` (n,), ``pixels`` (n, 2)
    as (u, v) = (column, row); -1 where provenance is unknown."""

    positions: np.ndarray
    probability: np.ndarray
    pixels: np.ndarray
    metadata: dict = field(default_factory=dict)
    probability_defaulted: bool = False

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.probability = np.asarray(self.probability, dtype=np.float64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        n = len(self.positions)
        if len(self.probability) != n or len(self.pixels) != n:
            raise ValueError("positions, probability and pixels must have the same length")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        if n and (self.probability.min() <= 0 or self.probability.max() > 1):
            raise ValueError("probabilities must lie in (0, 1]")

    def __len__(self):
        return len(self.positions)

    @property
    def has_provenance(self) -> bool:
        return bool(np.all(self.pixels >= 0))

    def subset(self, idx) -> "ProbabilisticPointCloud":
        idx = np.asarray(idx)
        return ProbabilisticPointCloud(self.positions[idx], self.probability[idx], self.pixels[idx],
                                       dict(self.metadata), self.probability_defaulted)

    @classmethod
    def empty(cls) -> "ProbabilisticPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2), dtype=np.int64))


def build_ppc(estimates: FrameEstimates, intrinsics: CameraIntrinsics, metadata: dict | None = None
              ) -> ProbabilisticPointCloud:
    """One point per valid pixel in row-major order, placed along the pixel
    ray at the estimated depth. Zero-depth estimates (peak in bin 0) are
    dropped since they cannot be unprojected."""
    if estimates.shape != intrinsics.shape:
        raise ValueError(f"estimates {estimates.shape} do not match camera {intrinsics.shape}")
    keep = estimates.valid & (estimates.depth > 0)
    v, u = np.nonzero(keep)
    pos = unproject(u, v, estimates.depth[v, u], intrinsics) if len(u) else np.zeros((0, 3))
    return ProbabilisticPointCloud(pos, estimates.probability[v, u], np.stack([u, v], axis=1),
                                   dict(metadata or {}))


# --- PLY -------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

_VERTEX_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("probability", "<f4"),
                          ("pixel_u", "<u2"), ("pixel_v", "<u2")])


def write_ply(cloud: ProbabilisticPointCloud, path):
    """Binary little-endian PLY with x, y, z, probability, pixel_u, pixel_v.

    Metadata goes into ``comment key=value`` header lines.
    """
    if len(cloud) and (cloud.pixels.min() < 0 or cloud.pixels.max() > 0xFFFF):
        raise PlyError("pixel provenance must fit in ushort to be written")
    rec = np.empty(len(cloud), dtype=_VERTEX_DTYPE)
    for i, name in enumerate("xyz"):
        rec[name] = cloud.positions[:, i]
    rec["probability"] = cloud.probability
    rec["pixel_u"] = cloud.pixels[:, 0]
    rec["pixel_v"] = cloud.pixels[:, 1]
    header = ["ply", "format binary_little_endian 1.0", f"comment generator spadppc {__version__}"]
    for key, value in cloud.metadata.items():
        if key == "generator":
            continue
        header.append(f"comment {key}={value}")
    header += [f"element vertex {len(cloud)}"]
    header += [f"property {t} {name}" for name, t in
               [("x", "float"), ("y", "float"), ("z", "float"), ("probability", "float"),
                ("pixel_u", "ushort"), ("pixel_v", "ushort")]]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def _parse_header(f):
    if f.readline().strip() != b"ply":
        raise PlyError("missing 'ply' magic line")
    fmt = None
    elements = []
    comments = []
    while True:
        line = f.readline()
        if not line:
            raise PlyError("header ended without end_header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts:
            continue
        kw = parts[0]
        if kw == "end_header":
            break
        if kw == "format":
            fmt = parts[1]
        elif kw == "comment" or kw == "obj_info":
            comments.append(" ".join(parts[1:]))
        elif kw == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif kw == "property":
            if not elements:
                raise PlyError("property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise PlyError(f"unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[2], parts[1]))
        else:
            raise PlyError(f"unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, comments


def _read_element(f, fmt, count, props):
    if any(p[1] == "list" for p in props):
        raise PlyError("list properties are not supported in the vertex element")
    dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
    if fmt == "binary_little_endian":
        data = f.read(dtype.itemsize * count)
        if len(data) != dtype.itemsize * count:
            raise PlyError("truncated vertex data")
        return np.frombuffer(data, dtype=dtype)
    rec = np.empty(count, dtype=dtype)
    for i in range(count):
        vals = f.readline().split()
        if len(vals) != len(props):
            raise PlyError(f"vertex {i}: expected {len(props)} values, got {len(vals)}")
        rec[i] = tuple(float(v) if dtype[j].kind == "f" else int(v) for j, v in enumerate(vals))
    return rec


def read_ply(path) -> ProbabilisticPointCloud:
    """Read an ASCII or binary little-endian PLY.

    Without a ``probability`` property every point gets probability 1.0 and
    ``probability_defaulted`` is set; without pixel properties provenance
    is -1.
    """
    with open(path, "rb") as f:
        fmt, elements, comments = _parse_header(f)
        vertex = None
        for name, count, props in elements:
            if name == "vertex":
                vertex = _read_element(f, fmt, count, props)
                break
            _read_element(f, fmt, count, props)  # skip earlier elements
    if vertex is None:
        raise PlyError("no vertex element")
    names = vertex.dtype.names
    for axis in "xyz":
        if axis not in names:
            raise PlyError(f"vertex element lacks property {axis!r}")
    pos = np.stack([vertex[a].astype(np.float64) for a in "xyz"], axis=1)
    defaulted = "probability" not in names
    if defaulted:
        warnings.warn(f"{path}: no probability property, assuming 1.0 for every point", stacklevel=2)
        prob = np.ones(len(vertex))
    else:
        prob = vertex["probability"].astype(np.float64)
    if "pixel_u" in names and "pixel_v" in names:
        pix = np.stack([vertex["pixel_u"], vertex["pixel_v"]], axis=1).astype(np.int64)
    else:
        pix = np.full((len(vertex), 2), -1, dtype=np.int64)
    meta = {}
    for c in comments:
        if "=" in c:
            k, v = c.split("=", 1)
            meta[k.strip()] = v.strip()
        elif c.startswith("generator "):
            meta["generator"] = c[len("generator "):]
    return ProbabilisticPointCloud(pos, prob, pix, meta, defaulted)
