"""Forward-only 3D primitives on (B, C, D, H, W) float64 arrays."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, softmax

NORM_EPS = 1e-5


def as_tensor5(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise ValueError(f"expected a (B, C, D, H, W) tensor, got shape {x.shape}")
    return x


def kaiming_init(shape, seed) -> np.ndarray:
    """He-normal weights: N(0, 2 / fan_in), fan_in = C_in * prod(kernel).

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in
    place).  Weights are stored as float32.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError(f"cannot derive fan-in from shape {shape}")
    fan_in = shape[1] * math.prod(shape[2:])
    if fan_in == 0:
        raise ValueError(f"zero fan-in for shape {shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def conv_params(c_out: int, c_in: int, k: int, rng) -> dict:
    return {"w": kaiming_init((c_out, c_in, k, k, k), rng), "b": np.zeros(c_out, dtype=np.float32)}


def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, dilation: int = 1) -> np.ndarray:
    """Stride-1 convolution with zero 'same' padding (odd kernels only).

    Implemented as a sum over kernel taps of channel-mixing matrix products,
    in a fixed tap order.
    """
    x = as_tensor5(x)
    w = np.asarray(w, dtype=np.float64)
    c_out, c_in, kz, ky, kx = w.shape
    bsz, c, d, h, wd = x.shape
    if c != c_in:
        raise ValueError(f"channel mismatch: input has {c}, weights expect {c_in}")
    if not (kz % 2 and ky % 2 and kx % 2):
        raise ValueError(f"kernel must be odd-sized, got {(kz, ky, kx)}")
    pz, py, px = (dilation * (k - 1) // 2 for k in (kz, ky, kx))
    if (kz, ky, kx) == (1, 1, 1):
        out = np.matmul(w[:, :, 0, 0, 0], x.reshape(bsz, c, -1))
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
        out = np.zeros((bsz, c_out, d * h * wd))
        for iz in range(kz):
            for iy in range(ky):
                for ix in range(kx):
                    oz, oy, ox = iz * dilation, iy * dilation, ix * dilation
                    patch = xp[:, :, oz:oz + d, oy:oy + h, ox:ox + wd].reshape(bsz, c, -1)
                    out += np.matmul(w[:, :, iz, iy, ix], patch)
    out = out.reshape(bsz, c_out, d, h, wd)
    if b is not None:
        out += np.asarray(b, dtype=np.float64).reshape(1, -1, 1, 1, 1)
    return out


def conv(x, p: dict, dilation: int = 1) -> np.ndarray:
    return conv3d(x, p["w"], p.get("b"), dilation)


def maxpool3d(x: np.ndarray, k: int = 2) -> np.ndarray:
    x = as_tensor5(x)
    bsz, c, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise ValueError(f"spatial dims {(d, h, w)} not divisible by pool size {k}")
    return x.reshape(bsz, c, d // k, k, h // k, k, w // k, k).max(axis=(3, 5, 7))


def _upsample_axis(x: np.ndarray, axis: int, scale: int) -> np.ndarray:
    n = x.shape[axis]
    # half-pixel centres, clamped at the borders
    src = np.clip((np.arange(n * scale) + 0.5) / scale - 0.5, 0.0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    t = src - i0
    shape = [1] * x.ndim
    shape[axis] = -1
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    return a + t.reshape(shape) * (b - a)


def upsample3d(x: np.ndarray, scale: int = 2) -> np.ndarray:
    """Trilinear upsampling by an integer factor."""
    x = as_tensor5(x)
    for axis in (2, 3, 4):
        x = _upsample_axis(x, axis, scale)
    return x


def instance_norm(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    x = as_tensor5(x)
    mean = x.mean(axis=(2, 3, 4), keepdims=True)
    var = x.var(axis=(2, 3, 4), keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def layer_norm(x: np.ndarray, axis=-1, eps: float = NORM_EPS) -> np.ndarray:
    mean = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return expit(x)


__all__ = [
    "as_tensor5", "conv", "conv3d", "conv_params", "instance_norm", "kaiming_init", "layer_norm",
    "maxpool3d", "relu", "sigmoid", "softmax", "upsample3d",
]
