"""Synthetic CBCT-like jaw phantoms with exact tooth labels.

Teeth are axis-aligned ellipsoids spaced along a parabolic dental arch in
the axial plane.  Ellipsoid inclusion is evaluated in voxel-index
coordinates, so the label is known analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import SIX_CONNECTED, Spacing, Volume, require_kind

BACKGROUND = 0.1
JAW = 0.3
TOOTH = 0.7
APPLIANCE = 0.95


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]  # (z, y, x) voxel index coordinates
    radii: tuple[float, float, float]

    def contains(self, z, y, x):
        cz, cy, cx = self.center
        rz, ry, rx = self.radii
        return ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 64, 64)
    spacing: Spacing = field(default_factory=lambda: Spacing(0.3, 0.25, 0.25))
    tooth_count: int = 8
    missing_teeth: bool = False
    appliance: bool = False
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.tooth_count < 0:
            raise ValueError("tooth_count must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def category(self) -> str:
        teeth = "Missing teeth" if self.missing_teeth else "Teeth"
        return f"{teeth} {'w' if self.appliance else 'w/o'} appliance"


def _arch(spec: PhantomSpec):
    """Arch parameterization: x spans the middle 70% of W, y follows a parabola."""
    d, h, w = spec.dims
    x_lo, x_hi = 0.15 * (w - 1), 0.85 * (w - 1)
    xc = (w - 1) / 2.0
    y_front, y_back = 0.3 * (h - 1), 0.7 * (h - 1)
    a = (y_back - y_front) / (x_hi - xc) ** 2

    def y_of(x):
        return y_front + a * (x - xc) ** 2

    return x_lo, x_hi, y_of


def tooth_ellipsoids(spec: PhantomSpec) -> list[Ellipsoid]:
    """Geometry of every tooth present in the phantom (after removals)."""
    n = spec.tooth_count
    if n == 0:
        return []
    d, h, w = spec.dims
    x_lo, x_hi, y_of = _arch(spec)
    xs = np.linspace(x_lo, x_hi, n) if n > 1 else np.array([(w - 1) / 2.0])
    gap = (x_hi - x_lo) / (n - 1) if n > 1 else 0.3 * w
    # keep neighbours disjoint: x-radius under half the centre gap
    r_xy = max(min(0.4 * gap, 0.08 * min(h, w)), 1.0)
    r_z = max(0.3 * d, 1.0)
    cz = (d - 1) / 2.0
    teeth = [Ellipsoid((cz, float(y_of(x)), float(x)), (r_z, r_xy, r_xy)) for x in xs]
    for t in teeth:
        for c, r, size in zip(t.center, t.radii, spec.dims):
            if c - r < 0 or c + r > size - 1:
                raise ValueError(f"tooth at {t.center} with radii {t.radii} exceeds volume {spec.dims}")
    if spec.missing_teeth and n > 1:
        rng = np.random.default_rng([spec.seed, 1])
        n_drop = max(1, n // 4)
        drop = set(rng.choice(n, size=n_drop, replace=False).tolist())
        teeth = [t for i, t in enumerate(teeth) if i not in drop]
    return teeth


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, Volume]:
    """Return (intensity, label) volumes for ``spec``."""
    d, h, w = spec.dims
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    intensity = np.full(spec.dims, BACKGROUND)

    x_lo, x_hi, y_of = _arch(spec)
    band = 0.1 * h
    jaw = (np.abs(y - y_of(x)) <= band) & (x >= x_lo - band) & (x <= x_hi + band)
    jaw &= np.abs(z - (d - 1) / 2.0) <= 0.4 * d
    intensity[jaw] = JAW

    teeth = tooth_ellipsoids(spec)
    label = np.zeros(spec.dims, dtype=bool)
    for t in teeth:
        label |= t.contains(z, y, x)
    intensity[label] = TOOTH

    if spec.appliance and teeth:
        rng = np.random.default_rng([spec.seed, 2])
        n_foci = max(1, len(teeth) // 3)
        for i in rng.choice(len(teeth), size=n_foci, replace=False):
            t = teeth[i]
            # a small bright focus on the outward side of the tooth
            fz, fy, fx = t.center[0], t.center[1] - t.radii[1] - 1.0, t.center[2]
            focus = (z - fz) ** 2 + (y - fy) ** 2 + (x - fx) ** 2 <= 1.5 ** 2
            intensity[focus & ~label] = APPLIANCE

    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 3])
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, size=spec.dims)

    return (
        Volume(intensity.astype(np.float32), spec.spacing, "intensity"),
        Volume(label.astype(np.uint8), spec.spacing, "label"),
    )


def perturb_prediction(label: Volume, dilate_steps: int = 0, flip_rate: float = 0.0, seed: int = 0) -> Volume:
    """A controlled imperfect prediction derived from a label volume.

    The mask is dilated ``dilate_steps`` times with 6-connectivity, then each
    voxel flips with probability ``flip_rate``.  Probabilities are a smoothed
    version of the result squeezed into [0.5, 1] on foreground and
    [0, 0.49] on background, so thresholding at 0.5 recovers the mask.
    """
    require_kind(label, "label")
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError(f"flip_rate must lie in [0, 1], got {flip_rate}")
    if dilate_steps < 0:
        raise ValueError("dilate_steps must be >= 0")
    mask = label.data.astype(bool)
    if dilate_steps:
        mask = ndimage.binary_dilation(mask, structure=SIX_CONNECTED, iterations=dilate_steps)
    rng = np.random.default_rng(seed)
    flips = rng.random(mask.shape) < flip_rate
    mask = mask ^ flips
    smooth = ndimage.gaussian_filter(mask.astype(np.float64), sigma=1.0, mode="nearest")
    prob = np.where(mask, 0.5 + 0.5 * smooth, 0.49 * smooth)
    return Volume(np.clip(prob, 0.0, 1.0), label.spacing, "probability")
