"""Slice-wise CLAHE, [0, 1] normalization and axial resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Spacing, Volume


@dataclass(frozen=True)
class ClaheParams:
    clip_limit: float = 2.0
    tiles: tuple[int, int] = (8, 8)
    bins: int = 256

    def __post_init__(self):
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be > 0")
        if len(self.tiles) != 2 or min(self.tiles) < 1:
            raise ValueError("tiles must be two integers >= 1")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


def _bin_index(img: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    idx = np.floor((img - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    # floor(x + 0.5), not np.round: banker's rounding can merge two edges
    return np.floor(np.linspace(0, n, tiles + 1) + 0.5).astype(np.int64)


def _clipped_cdf(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clip a histogram, spread the excess uniformly, return its CDF in [0, 1]."""
    n = hist.sum()
    bins = hist.size
    limit = max(1.0, clip_limit * n / bins)
    h = hist.astype(np.float64)
    excess = np.maximum(h - limit, 0.0).sum()
    h = np.minimum(h, limit) + excess / bins
    cdf = np.cumsum(h) / n
    return np.minimum(cdf, 1.0)


def _interp_axis(n: int, edges: np.ndarray):
    """Neighbouring tile indices and weights for every pixel along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.interp(np.arange(n, dtype=np.float64), centers, np.arange(len(centers), dtype=np.float64))
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, len(centers) - 1)
    return i0, i1, pos - i0


def clahe_slice(img: np.ndarray, params: ClaheParams | None = None) -> np.ndarray:
    """Contrast limited adaptive histogram equalization of one 2D slice.

    Each tile gets a clipped-histogram equalization mapping; pixels blend
    the mappings of the four nearest tile centres bilinearly.  The output is
    mapped back onto the input's [min, max] range.
    """
    params = params or ClaheParams()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("clahe_slice expects a 2D slice")
    h, w = img.shape
    ty, tx = params.tiles
    if h < ty or w < tx:
        raise ValueError(f"slice {img.shape} smaller than tile grid {params.tiles}")
    lo, hi = float(img.min()), float(img.max())
    if lo == hi:
        return img.copy()

    b = _bin_index(img, lo, hi, params.bins)
    ey, ex = _tile_edges(h, ty), _tile_edges(w, tx)
    lut = np.empty((ty, tx, params.bins))
    for i in range(ty):
        for j in range(tx):
            tile = b[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=params.bins)
            lut[i, j] = _clipped_cdf(hist, params.clip_limit)

    y0, y1, wy = _interp_axis(h, ey)
    x0, x1, wx = _interp_axis(w, ex)
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")
    top = lut[Y0, X0, b] + WX * (lut[Y0, X1, b] - lut[Y0, X0, b])
    bottom = lut[Y1, X0, b] + WX * (lut[Y1, X1, b] - lut[Y1, X0, b])
    m = top + WY * (bottom - top)
    return np.clip(lo + m * (hi - lo), lo, hi)


def clahe_volume(v: Volume, params: ClaheParams | None = None) -> Volume:
    """CLAHE applied independently to every axial slice."""
    out = np.stack([clahe_slice(s, params) for s in np.asarray(v.data, dtype=np.float64)])
    return Volume(out, v.spacing, "intensity")


def normalize_volume(v: Volume) -> Volume:
    """Min-max scale to [0, 1]; a constant volume maps to all zeros."""
    x = np.asarray(v.data, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if lo == hi:
        return Volume(np.zeros_like(x), v.spacing, "probability")
    return Volume((x - lo) / (hi - lo), v.spacing, "probability")


def _resample_axis(n_in: int, n_out: int):
    if n_out == 1:
        src = np.zeros(1)
    else:
        # align corners: first and last samples coincide with the input's
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_slices(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear align-corners resampling of the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return x.copy()
    y0, y1, wy = _resample_axis(h, oh)
    x0, x1, wx = _resample_axis(w, ow)
    wy = wy[:, None]
    a = x[..., y0, :]
    b = x[..., y1, :]
    rows = a + wy * (b - a)
    left = rows[..., x0]
    right = rows[..., x1]
    return left + wx * (right - left)


def resize_axial(v: Volume, out_hw: tuple[int, int] = (256, 256)) -> Volume:
    """Resample every axial slice to ``out_hw``; depth is unchanged.

    Label volumes are re-binarized at 0.5 after interpolation.
    """
    _, h, w = v.dims
    if h < 2 or w < 2:
        raise ValueError("resize needs H, W >= 2")
    oh, ow = out_hw
    spacing = Spacing(v.spacing.dz, v.spacing.dy * h / oh, v.spacing.dx * w / ow)
    if (h, w) == (oh, ow):
        return Volume(v.data, v.spacing, v.kind)
    out = resize_slices(v.data, out_hw)
    if v.kind == "label":
        return Volume((out >= 0.5).astype(np.uint8), spacing, "label")
    if v.kind == "probability":
        out = np.clip(out, 0.0, 1.0)
    return Volume(out, spacing, v.kind)


def preprocess_volume(v: Volume, params: ClaheParams | None = None,
                      resize: tuple[int, int] | None = None) -> Volume:
    """CLAHE, then normalization, then optional resize."""
    out = normalize_volume(clahe_volume(v, params))
    if resize is not None:
        out = resize_axial(out, resize)
    return out
