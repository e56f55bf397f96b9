"""Shape-preserving attention modules for the encoder bottleneck.

Every ``*_forward`` function takes a (B, C, D, H, W) tensor and returns a
tensor of the same shape.  Passing a dict as ``trace`` records the
internal distributions:

* ``trace["softmax"]``: list of ``(name, array, axis)``, normalized along ``axis``
* ``trace["gate"]``: list of ``(name, array)`` multiplicative coefficients
"""

from __future__ import annotations

import numpy as np

from .ops import as_tensor5, conv, conv_params, instance_norm, kaiming_init, layer_norm, relu, sigmoid, softmax

VARIANTS = ("none", "se", "sk", "cbam", "gate", "polar", "danet")

REDUCTION = 2


def _record(trace, key, *item):
    if trace is not None:
        trace.setdefault(key, []).append(item)


def _linear(z: np.ndarray, p: dict) -> np.ndarray:
    # z: (B, in) -> (B, out)
    return z @ p["w"].astype(np.float64).T + p["b"].astype(np.float64)


def _linear_params(n_out, n_in, rng):
    return {"w": kaiming_init((n_out, n_in), rng), "b": np.zeros(n_out, dtype=np.float32)}


def _hidden(c: int) -> int:
    return max(c // REDUCTION, 1)


# -- squeeze-and-excitation ---------------------------------------------------

def init_se(c, rng):
    h = _hidden(c)
    return {"fc1": _linear_params(h, c, rng), "fc2": _linear_params(c, h, rng)}


def se_forward(x, p, trace=None):
    z = x.mean(axis=(2, 3, 4))
    s = sigmoid(_linear(relu(_linear(z, p["fc1"])), p["fc2"]))
    _record(trace, "gate", "se.channel", s)
    return x * s[:, :, None, None, None]


# -- selective kernel ---------------------------------------------------------

def init_sk(c, rng):
    h = _hidden(c)
    return {
        "branch3": conv_params(c, c, 3, rng),
        "branch5": conv_params(c, c, 3, rng),  # dilation 2: 5^3 receptive field
        "fc": _linear_params(h, c, rng),
        "select": [_linear_params(c, h, rng), _linear_params(c, h, rng)],
    }


def sk_forward(x, p, trace=None):
    u3 = relu(instance_norm(conv(x, p["branch3"])))
    u5 = relu(instance_norm(conv(x, p["branch5"], dilation=2)))
    z = relu(_linear((u3 + u5).mean(axis=(2, 3, 4)), p["fc"]))
    logits = np.stack([_linear(z, q) for q in p["select"]])  # (2, B, C)
    a = softmax(logits, axis=0)
    _record(trace, "softmax", "sk.branch", a, 0)
    return a[0][:, :, None, None, None] * u3 + a[1][:, :, None, None, None] * u5


# -- CBAM ---------------------------------------------------------------------

def init_cbam(c, rng):
    h = _hidden(c)
    return {
        "mlp1": _linear_params(h, c, rng),
        "mlp2": _linear_params(c, h, rng),
        "spatial": conv_params(1, 2, 7, rng),
    }


def cbam_forward(x, p, trace=None):
    def mlp(z):
        return _linear(relu(_linear(z, p["mlp1"])), p["mlp2"])

    mc = sigmoid(mlp(x.mean(axis=(2, 3, 4))) + mlp(x.max(axis=(2, 3, 4))))
    _record(trace, "gate", "cbam.channel", mc)
    x = x * mc[:, :, None, None, None]
    pooled = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    ms = sigmoid(conv(pooled, p["spatial"]))
    _record(trace, "gate", "cbam.spatial", ms)
    return x * ms


# -- additive attention gate --------------------------------------------------

def init_gate(c, rng, c_gating=None):
    h = _hidden(c)
    return {
        "theta": conv_params(h, c, 1, rng),
        "phi": conv_params(h, c_gating or c, 1, rng),
        "psi": conv_params(1, h, 1, rng),
    }


def gate_forward(x, p, gating=None, trace=None):
    """Additive attention: alpha = sigmoid(psi(relu(theta(x) + phi(g)))).

    ``gating`` must share the spatial shape of ``x``; without it the input
    gates itself.
    """
    g = x if gating is None else as_tensor5(gating)
    if g.shape[2:] != x.shape[2:]:
        raise ValueError(f"gating spatial shape {g.shape[2:]} differs from input {x.shape[2:]}")
    alpha = sigmoid(conv(relu(conv(x, p["theta"]) + conv(g, p["phi"])), p["psi"]))
    _record(trace, "gate", "gate.alpha", alpha)
    return x * alpha


# -- polarized self-attention (sequential) ------------------------------------

def init_polar(c, rng):
    h = _hidden(c)
    return {
        "ch_v": conv_params(h, c, 1, rng),
        "ch_q": conv_params(1, c, 1, rng),
        "ch_z": conv_params(c, h, 1, rng),
        "sp_v": conv_params(h, c, 1, rng),
        "sp_q": conv_params(h, c, 1, rng),
    }


def polar_forward(x, p, trace=None):
    bsz, c, d, hh, w = x.shape
    n = d * hh * w
    # channel branch: softmax over positions pools a C/2 context vector
    v = conv(x, p["ch_v"]).reshape(bsz, -1, n)
    q = softmax(conv(x, p["ch_q"]).reshape(bsz, n), axis=1)
    _record(trace, "softmax", "polar.channel_context", q, 1)
    ctx = np.einsum("bcn,bn->bc", v, q)[:, :, None, None, None]
    ch = sigmoid(layer_norm(conv(ctx, p["ch_z"]).reshape(bsz, c), axis=1))
    _record(trace, "gate", "polar.channel", ch)
    x = x * ch[:, :, None, None, None]
    # spatial branch: softmax over channels of the pooled query
    v = conv(x, p["sp_v"]).reshape(bsz, -1, n)
    q = softmax(conv(x, p["sp_q"]).mean(axis=(2, 3, 4)), axis=1)
    _record(trace, "softmax", "polar.spatial_context", q, 1)
    sp = sigmoid(np.einsum("bcn,bc->bn", v, q)).reshape(bsz, 1, d, hh, w)
    _record(trace, "gate", "polar.spatial", sp)
    return x * sp


# -- dual attention -----------------------------------------------------------

def init_danet(c, rng):
    k = max(c // 8, 1)
    return {
        "query": conv_params(k, c, 1, rng),
        "key": conv_params(k, c, 1, rng),
        "value": conv_params(c, c, 1, rng),
        "gamma": np.array(1.0, dtype=np.float32),
        "beta": np.array(1.0, dtype=np.float32),
    }


def danet_forward(x, p, trace=None):
    bsz, c, d, h, w = x.shape
    n = d * h * w
    # position attention: (N x N) affinities, rows normalized
    q = conv(x, p["query"]).reshape(bsz, -1, n)
    k = conv(x, p["key"]).reshape(bsz, -1, n)
    v = conv(x, p["value"]).reshape(bsz, c, n)
    pos = softmax(np.matmul(q.transpose(0, 2, 1), k), axis=-1)
    _record(trace, "softmax", "danet.position", pos, -1)
    out_p = float(p["gamma"]) * np.matmul(v, pos.transpose(0, 2, 1)).reshape(x.shape) + x
    # channel attention: (C x C) affinities
    xf = x.reshape(bsz, c, n)
    energy = np.matmul(xf, xf.transpose(0, 2, 1))
    energy = energy.max(axis=-1, keepdims=True) - energy
    cha = softmax(energy, axis=-1)
    _record(trace, "softmax", "danet.channel", cha, -1)
    out_c = float(p["beta"]) * np.matmul(cha, xf).reshape(x.shape) + x
    return out_p + out_c


_INIT = {
    "se": init_se,
    "sk": init_sk,
    "cbam": init_cbam,
    "gate": init_gate,
    "polar": init_polar,
    "danet": init_danet,
}


def init_attention(variant: str, channels: int, rng) -> dict:
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if variant == "none":
        return {}
    return _INIT[variant](channels, rng)


def attention_forward(x, variant: str, params: dict, gating=None, trace: dict | None = None) -> np.ndarray:
    """Apply one attention variant; output shape equals input shape."""
    x = as_tensor5(x)
    if variant == "none":
        return x
    if variant == "se":
        return se_forward(x, params, trace)
    if variant == "sk":
        return sk_forward(x, params, trace)
    if variant == "cbam":
        return cbam_forward(x, params, trace)
    if variant == "gate":
        return gate_forward(x, params, gating, trace)
    if variant == "polar":
        return polar_forward(x, params, trace)
    if variant == "danet":
        return danet_forward(x, params, trace)
    raise ValueError(f"unknown attention variant {variant!r}; choose from {', '.join(VARIANTS)}")
