"""Volumes, spacing, thresholding and surface extraction.

Arrays are stored z-major, i.e. ``data[z, y, x]`` with shape ``(D, H, W)``,
matching a stack of axial CT slices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

KINDS = ("intensity", "label", "probability")

# 6-connectivity: faces only
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class Spacing:
    """Millimetres per voxel along depth, height and width."""

    dz: float = 1.0
    dy: float = 1.0
    dx: float = 1.0

    def __post_init__(self):
        for name in ("dz", "dy", "dx"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v <= 0:
                raise ValueError(f"spacing {name} must be finite and > 0, got {v!r}")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.dz, self.dy, self.dx], dtype=np.float64)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dz, self.dy, self.dx)

    def scaled(self, factor: float) -> "Spacing":
        return Spacing(self.dz * factor, self.dy * factor, self.dx * factor)


@dataclass(frozen=True, eq=False)
class Volume:
    """An immutable 3D grid with physical spacing.

    ``kind`` is one of ``intensity``, ``label`` (values in {0, 1}) or
    ``probability`` (values in [0, 1]).
    """

    data: np.ndarray
    spacing: Spacing = field(default_factory=Spacing)
    kind: str = "intensity"

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype.kind not in "uif" and arr.dtype != np.bool_:
            raise TypeError(f"unsupported volume dtype {arr.dtype}")
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        if not isinstance(self.spacing, Spacing):
            object.__setattr__(self, "spacing", Spacing(*self.spacing))
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "label":
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("label volume must contain only 0 and 1")
        elif self.kind == "probability":
            if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
                raise ValueError("probability volume values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data, kind: str | None = None, spacing: Spacing | None = None) -> "Volume":
        return Volume(data, spacing or self.spacing, kind or self.kind)

    def __repr__(self):
        return f"Volume(dims={self.dims}, spacing={self.spacing.as_tuple()}, kind={self.kind!r}, dtype={self.data.dtype})"


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    """Boundary voxels of a mask in physical (z, y, x) millimetre coordinates.

    When the set was extracted from a grid, ``indices``, ``dims`` and
    ``spacing`` are kept so that distance queries can run on the voxel grid.
    """

    points: np.ndarray
    indices: np.ndarray | None = None
    dims: tuple[int, int, int] | None = None
    spacing: Spacing | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
            if len(idx) != len(pts):
                raise ValueError("indices and points differ in length")
            idx.setflags(write=False)
            object.__setattr__(self, "indices", idx)

    @classmethod
    def from_points(cls, points) -> "SurfacePointSet":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("surface points must be unique")
        return cls(pts)

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self):
        return self.count

    @property
    def on_grid(self) -> bool:
        return self.indices is not None and self.dims is not None and self.spacing is not None


def require_kind(v: Volume, kind: str, what: str = "volume"):
    if not isinstance(v, Volume):
        raise TypeError(f"{what} must be a Volume, got {type(v).__name__}")
    if v.kind != kind:
        raise ValueError(f"{what} must be a {kind} volume, got kind={v.kind!r}")


def require_same_dims(a: Volume, b: Volume):
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")


def threshold_prob(v: Volume, t: float = 0.5) -> Volume:
    """Binarize a probability volume; a voxel is foreground iff value >= t."""
    require_kind(v, "probability")
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return Volume((v.data >= t).astype(np.uint8), v.spacing, "label")


def voxel_coordinates(indices: np.ndarray, spacing: Spacing) -> np.ndarray:
    """Physical coordinates of integer voxel indices.

    Every distance kernel goes through this function so that the same voxel
    always maps to the same floating-point coordinate.
    """
    return np.asarray(indices, dtype=np.float64) * spacing.as_array()


def extract_surface(m: Volume) -> SurfacePointSet:
    """Foreground voxels with a background or out-of-bounds 6-neighbour."""
    require_kind(m, "label", "mask")
    fg = m.data.astype(bool)
    interior = ndimage.binary_erosion(fg, structure=SIX_CONNECTED, border_value=0)
    idx = np.argwhere(fg & ~interior)
    return SurfacePointSet(voxel_coordinates(idx, m.spacing), idx, m.dims, m.spacing)


def confusion_counts(p: Volume, r: Volume) -> tuple[int, int, int, int]:
    """Voxel counts (TP, FP, FN, TN) of prediction ``p`` against reference ``r``."""
    require_kind(p, "label", "prediction")
    require_kind(r, "label", "reference")
    require_same_dims(p, r)
    pb = p.data.astype(bool)
    rb = r.data.astype(bool)
    tp = int(np.count_nonzero(pb & rb))
    fp = int(np.count_nonzero(pb & ~rb))
    fn = int(np.count_nonzero(~pb & rb))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn
