"""A small MLP-Mixer over the four feature tokens, with hand-written backprop.

Every scalar of the feature tuple becomes one token.  A token is lifted to
``embed_dim`` channels by its own affine map, then each layer applies

    h = h + TokenMLP(LayerNorm(h))      (mixes across the 4 tokens)
    h = h + ChannelMLP(LayerNorm(h))    (mixes across channels)

and the head reads the token-averaged embedding.  All math is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf

from .errors import ModelFormatError

FORMAT_VERSION = 1
LN_EPS = 1e-9
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

GradientBuffer = dict  # name -> ndarray, shape-congruent with MixerModel.params


@dataclass(frozen=True)
class MixerConfig:
    tokens: int = 4
    embed_dim: int = 32
    token_hidden: int = 32
    channel_hidden: int = 32
    layers: int = 2
    head_outputs: int = 1

    def __post_init__(self):
        if self.tokens != 4:
            raise ValueError("the feature tuple always has 4 tokens")
        for name in ("embed_dim", "token_hidden", "channel_hidden", "head_outputs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        T, D = self.tokens, self.embed_dim
        shapes = {"embed.w": (T, D), "embed.b": (T, D)}
        for i in range(self.layers):
            p = f"layers.{i}."
            shapes.update({
                p + "ln1.g": (D,),
                p + "ln1.b": (D,),
                p + "tok.w1": (T, self.token_hidden),
                p + "tok.b1": (self.token_hidden,),
                p + "tok.w2": (self.token_hidden, T),
                p + "tok.b2": (T,),
                p + "ln2.g": (D,),
                p + "ln2.b": (D,),
                p + "ch.w1": (D, self.channel_hidden),
                p + "ch.b1": (self.channel_hidden,),
                p + "ch.w2": (self.channel_hidden, D),
                p + "ch.b2": (D,),
            })
        shapes["head.w"] = (D, self.head_outputs)
        shapes["head.b"] = (self.head_outputs,)
        return shapes


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices only, never to biases or norm gains."""
    return name.endswith(".w") or name.endswith(".w1") or name.endswith(".w2")


@dataclass
class MixerModel:
    config: MixerConfig
    params: dict

    def copy(self) -> "MixerModel":
        return MixerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


def init_model(config: MixerConfig, seed: int) -> MixerModel:
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    params = {}
    for name, shape in config.param_shapes().items():
        if name.startswith("head."):
            params[name] = np.zeros(shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape)
        elif is_decayed(name):
            fan_in = 1 if name == "embed.w" else shape[0]
            bound = math.sqrt(1.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return MixerModel(config, params)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_with_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu_grad(x):
    return _gelu_with_grad(x)[1]


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dout, g, cache):
    xhat, inv = cache
    dg = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dout.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dout * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _as_batch(x) -> tuple[np.ndarray, bool]:
    if hasattr(x, "as_array"):
        x = x.as_array()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def forward_batch(model: MixerModel, X: np.ndarray):
    """Forward pass on an (n, 4) batch; returns (outputs (n, k), cache)."""
    p = model.params
    cfg = model.config
    n, T, D = X.shape[0], cfg.tokens, cfg.embed_dim
    h = X[:, :, None] * p["embed.w"][None] + p["embed.b"][None]
    caches = []
    for i in range(cfg.layers):
        q = f"layers.{i}."
        u, ln1 = _layer_norm(h, p[q + "ln1.g"], p[q + "ln1.b"])
        # token mixing runs over the token axis: rows are (sample, channel) pairs
        ut = u.transpose(0, 2, 1).reshape(n * D, T)
        z1, dz1 = _gelu_with_grad(ut @ p[q + "tok.w1"] + p[q + "tok.b1"])
        o1 = (z1 @ p[q + "tok.w2"] + p[q + "tok.b2"]).reshape(n, D, T).transpose(0, 2, 1)
        h = h + o1
        v, ln2 = _layer_norm(h, p[q + "ln2.g"], p[q + "ln2.b"])
        v2 = v.reshape(n * T, D)
        z2, dz2 = _gelu_with_grad(v2 @ p[q + "ch.w1"] + p[q + "ch.b1"])
        h = h + (z2 @ p[q + "ch.w2"] + p[q + "ch.b2"]).reshape(n, T, D)
        caches.append((ut, ln1, z1, dz1, v2, ln2, z2, dz2))
    m = h.mean(axis=1)
    out = m @ p["head.w"] + p["head.b"]
    return out, (X, caches, m)


def backward_batch(model: MixerModel, cache, upstream: np.ndarray, want_input: bool = False):
    """Reverse pass; gradients are summed over the batch.

    ``upstream`` has the shape of the outputs.  Returns a GradientBuffer, or
    (GradientBuffer, dL/dX) when ``want_input`` is set.
    """
    p = model.params
    cfg = model.config
    X, caches, m = cache
    n, T, D = X.shape[0], cfg.tokens, cfg.embed_dim
    upstream = np.asarray(upstream, dtype=np.float64).reshape(n, cfg.head_outputs)
    grads = {}
    grads["head.w"] = m.T @ upstream
    grads["head.b"] = upstream.sum(axis=0)
    dm = upstream @ p["head.w"].T
    dh = np.repeat(dm[:, None, :] / T, T, axis=1)
    for i in reversed(range(cfg.layers)):
        q = f"layers.{i}."
        ut, ln1, z1, dz1, v2, ln2, z2, dz2 = caches[i]
        # channel MLP
        dh2 = dh.reshape(n * T, D)
        grads[q + "ch.b2"] = dh2.sum(axis=0)
        grads[q + "ch.w2"] = z2.T @ dh2
        da2 = (dh2 @ p[q + "ch.w2"].T) * dz2
        grads[q + "ch.b1"] = da2.sum(axis=0)
        grads[q + "ch.w1"] = v2.T @ da2
        dv = (da2 @ p[q + "ch.w1"].T).reshape(n, T, D)
        dx, grads[q + "ln2.g"], grads[q + "ln2.b"] = _layer_norm_backward(dv, p[q + "ln2.g"], ln2)
        dh = dh + dx
        # token MLP
        dht = dh.transpose(0, 2, 1).reshape(n * D, T)
        grads[q + "tok.b2"] = dht.sum(axis=0)
        grads[q + "tok.w2"] = z1.T @ dht
        da1 = (dht @ p[q + "tok.w2"].T) * dz1
        grads[q + "tok.b1"] = da1.sum(axis=0)
        grads[q + "tok.w1"] = ut.T @ da1
        du = (da1 @ p[q + "tok.w1"].T).reshape(n, D, T).transpose(0, 2, 1)
        dx, grads[q + "ln1.g"], grads[q + "ln1.b"] = _layer_norm_backward(du, p[q + "ln1.g"], ln1)
        dh = dh + dx
    grads["embed.w"] = np.einsum("bt,btd->td", X, dh)
    grads["embed.b"] = dh.sum(axis=0)
    grads = {k: grads[k] for k in p}
    if want_input:
        return grads, (dh * p["embed.w"][None]).sum(axis=-1)
    return grads


def forward(model: MixerModel, x) -> np.ndarray:
    """Head outputs for one feature tuple (shape (k,)) or a batch (shape (n, k))."""
    X, single = _as_batch(x)
    out, _ = forward_batch(model, X)
    return out[0] if single else out


def backward(model: MixerModel, x, upstream) -> GradientBuffer:
    X, single = _as_batch(x)
    _, cache = forward_batch(model, X)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        up = up.reshape(1, -1)
    return backward_batch(model, cache, up)


def zeros_like(model: MixerModel) -> GradientBuffer:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def global_norm(grads: GradientBuffer) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: GradientBuffer, max_norm: float) -> GradientBuffer:
    if not max_norm > 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return {k: g.copy() for k, g in grads.items()}


def count_flops(config: MixerConfig) -> int:
    """Multiply-adds counted as two FLOPs; norms, activations and means ignored."""
    T, D = config.tokens, config.embed_dim
    per_layer = 2 * D * T * config.token_hidden * 2 + 2 * T * D * config.channel_hidden * 2
    return 2 * T * D + config.layers * per_layer + 2 * D * config.head_outputs


def model_to_dict(model: MixerModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel(order="C")]}
            for name, arr in model.params.items()
        },
    }


def model_from_dict(doc: dict) -> MixerModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format_version {version!r}")
    try:
        config = MixerConfig(**doc["config"])
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad config: {exc}") from exc
    expected = config.param_shapes()
    stored = doc.get("params", {})
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ModelFormatError(f"parameter names mismatch: missing={missing} unexpected={extra}")
    params = {}
    for name, shape in expected.items():
        entry = stored[name]
        if tuple(entry["shape"]) != shape:
            raise ModelFormatError(f"{name}: shape {entry['shape']} != expected {list(shape)}")
        arr = np.asarray(entry["data"], dtype=np.float64)
        if arr.size != math.prod(shape):
            raise ModelFormatError(f"{name}: {arr.size} values for shape {list(shape)}")
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"{name}: non-finite values")
        params[name] = arr.reshape(shape)
    return MixerModel(config, params)
