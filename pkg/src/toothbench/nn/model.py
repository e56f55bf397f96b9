"""Residual 3D encoder-decoder with an attention branch at the bottleneck.

Layout for ``num_encoders = 3`` and base width ``c``::

    x -> REB(1->c) -> pool -> REB(c->2c) -> pool -> REB(2c->4c) -> pool
      -> [attention(4c)] + [REB(4c->4c)]                 (summed)
      -> DB(up, skip 4c -> 2c) -> DB(up, skip 2c -> c) -> DB(up, skip c -> c)
      -> 1x1x1 conv -> sigmoid

With ``ds_heads`` the first two decoder stages also emit a 1x1x1 conv +
sigmoid map, trilinearly upsampled to the input resolution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import VARIANTS, attention_forward, init_attention
from .ops import as_tensor5, conv, conv_params, instance_norm, maxpool3d, relu, sigmoid, upsample3d

REB_CONVS = 5


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 8
    num_encoders: int = 3
    attention: str = "sk"
    ds_heads: bool = True
    seed: int = 0
    ds_weights: tuple[float, ...] = (1.0, 1.0, 1.0)  # training-time only, unused here

    def __post_init__(self):
        if self.num_encoders != 3:
            raise ValueError("the architecture has exactly three residual encoder blocks")
        if self.attention not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention!r}; choose from {', '.join(VARIANTS)}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.num_encoders)]


# -- blocks -------------------------------------------------------------------

def init_reb(c_in: int, c_out: int, rng) -> dict:
    p = {"convs": [conv_params(c_out, c_in if i == 0 else c_out, 3, rng) for i in range(REB_CONVS)]}
    if c_in != c_out:
        p["proj"] = conv_params(c_out, c_in, 1, rng)
    return p


def reb_forward(x: np.ndarray, p: dict) -> np.ndarray:
    """Five conv+norm stages; the shortcut joins before the last ReLU."""
    x = as_tensor5(x)
    convs = p["convs"]
    if len(convs) != REB_CONVS:
        raise ValueError(f"residual block needs {REB_CONVS} convolutions, got {len(convs)}")
    h = x
    for cp in convs[:-1]:
        h = relu(instance_norm(conv(h, cp)))
    h = instance_norm(conv(h, convs[-1]))
    shortcut = conv(x, p["proj"]) if "proj" in p else x
    if shortcut.shape != h.shape:
        raise ValueError(f"shortcut shape {shortcut.shape} does not match body {h.shape}")
    return relu(h + shortcut)


def init_db(c_in: int, c_skip: int, c_out: int, rng) -> dict:
    return {"conv1": conv_params(c_out, c_in + c_skip, 3, rng), "conv2": conv_params(c_out, c_out, 3, rng)}


def db_forward(x: np.ndarray, skip: np.ndarray, p: dict) -> np.ndarray:
    h = np.concatenate([upsample3d(x, 2), skip], axis=1)
    h = relu(instance_norm(conv(h, p["conv1"])))
    return relu(instance_norm(conv(h, p["conv2"])))


# -- model --------------------------------------------------------------------

def init_model(cfg: ModelConfig) -> dict:
    """Seeded Kaiming-initialized parameters, drawn in a fixed order."""
    rng = np.random.default_rng(cfg.seed)
    widths = cfg.widths
    enc, c_prev = [], cfg.in_channels
    for c in widths:
        enc.append(init_reb(c_prev, c, rng))
        c_prev = c
    deep = widths[-1]
    params = {
        "encoders": enc,
        "bottleneck": init_reb(deep, deep, rng),
        "attention": init_attention(cfg.attention, deep, rng),
    }
    dec, c_in = [], deep
    skips = widths[::-1]
    outs = widths[-2::-1] + [widths[0]]
    for c_skip, c_out in zip(skips, outs):
        dec.append(init_db(c_in, c_skip, c_out, rng))
        c_in = c_out
    params["decoders"] = dec
    params["head"] = conv_params(1, outs[-1], 1, rng)
    if cfg.ds_heads:
        params["ds"] = [conv_params(1, c, 1, rng) for c in outs[:-1]]
    return params


def model_forward(x, cfg: ModelConfig, params: dict | None, trace: dict | None = None):
    """Return ``(main, aux)``: a (B, 1, D, H, W) probability map and the
    deep-supervision maps (empty list without ``ds_heads``)."""
    if params is None:
        raise ValueError("model parameters are not initialized; call init_model(cfg)")
    x = as_tensor5(x)
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")
    factor = 2**cfg.num_encoders
    if any(s % factor for s in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {factor}")

    skips, h = [], x
    for p in params["encoders"]:
        h = reb_forward(h, p)
        skips.append(h)
        h = maxpool3d(h, 2)
    bottleneck = reb_forward(h, params["bottleneck"])
    if cfg.attention == "none":
        h = bottleneck
    else:
        h = attention_forward(h, cfg.attention, params["attention"], gating=bottleneck, trace=trace) + bottleneck

    aux = []
    n_dec = len(params["decoders"])
    for i, (p, skip) in enumerate(zip(params["decoders"], reversed(skips))):
        h = db_forward(h, skip, p)
        if cfg.ds_heads and i < n_dec - 1:
            a = sigmoid(conv(h, params["ds"][i]))
            aux.append(upsample3d(a, 2 ** (n_dec - 1 - i)))
    main = sigmoid(conv(h, params["head"]))
    return main, aux


def output_hash(main: np.ndarray, aux=(), decimals: int = 8) -> str:
    """SHA-256 over outputs rounded to ``decimals``, insensitive to BLAS
    summation-order noise in the last bits."""
    h = hashlib.sha256()
    for t in (main, *aux):
        arr = np.ascontiguousarray(np.round(np.asarray(t, dtype=np.float64), decimals))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# -- parameter files ----------------------------------------------------------

def flatten_params(params, prefix: str = "") -> dict[str, np.ndarray]:
    flat = {}
    items = params.items() if isinstance(params, dict) else enumerate(params)
    for k, v in items:
        name = f"{prefix}{k}"
        if isinstance(v, (dict, list)):
            flat.update(flatten_params(v, name + "."))
        else:
            flat[name] = np.asarray(v)
    return flat


def _set_path(root: dict, keys: list[str], value):
    node = root
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def _listify(node):
    if not isinstance(node, dict):
        return node
    node = {k: _listify(v) for k, v in node.items()}
    if node and all(k.isdigit() for k in node):
        return [node[str(i)] for i in range(len(node))]
    return node


def unflatten_params(flat: dict[str, np.ndarray]) -> dict:
    root: dict = {}
    for name, arr in flat.items():
        _set_path(root, name.split("."), arr)
    return _listify(root)


def save_params(params: dict, path) -> tuple[Path, Path]:
    """Write parameters as ``<stem>.ctparams.json`` + ``<stem>.ctparams.raw`` (f32, little endian)."""
    stem = str(path).removesuffix(".ctparams.json").removesuffix(".ctparams.raw")
    header_path, raw_path = Path(stem + ".ctparams.json"), Path(stem + ".ctparams.raw")
    tensors, chunks, offset = [], [], 0
    for name, arr in sorted(flatten_params(params).items()):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    header = {"dtype": "f32", "endianness": "little", "tensors": tensors}
    header_path.write_text(json.dumps(header, indent=1) + "\n")
    raw_path.write_bytes(b"".join(chunks))
    return header_path, raw_path


def load_params(path) -> dict:
    stem = str(path).removesuffix(".ctparams.json").removesuffix(".ctparams.raw")
    header = json.loads(Path(stem + ".ctparams.json").read_text())
    raw = Path(stem + ".ctparams.raw").read_bytes()
    flat = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if t["offset"] + 4 * count > len(raw):
            raise ValueError(f"parameter blob truncated at tensor {t['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=t["offset"])
        flat[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    return unflatten_params(flat)
