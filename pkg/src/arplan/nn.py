"""Layers built from tensor primitives: linear/MLP, layer norm, attention, GRU.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names; every
layer function takes the dict plus a key prefix, so the whole model can be
iterated for optimization and finite-difference checks.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, concat

MASK_NEG = -1e9


class Params(dict):
    """Flat parameter dictionary with deterministic iteration order."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.grad = None


def init_linear(params: Params, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator, zero: bool = False):
    if zero:
        w = np.zeros((d_in, d_out))
    else:
        scale = math.sqrt(2.0 / (d_in + d_out))
        w = rng.normal(0.0, scale, size=(d_in, d_out))
    params.add(prefix + ".w", w)
    params.add(prefix + ".b", np.zeros(d_out))


def linear(params: Params, prefix: str, x: Tensor) -> Tensor:
    return x @ params[prefix + ".w"] + params[prefix + ".b"]


def init_mlp(params: Params, prefix: str, dims: list[int],
             rng: np.random.Generator, zero_last: bool = False):
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(params, f"{prefix}.l{i}", a, b, rng,
                    zero=zero_last and i == len(dims) - 2)


def mlp(params: Params, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """ReLU MLP; no activation after the last layer."""
    for i in range(n_layers):
        x = linear(params, f"{prefix}.l{i}", x)
        if i < n_layers - 1:
            x = x.relu()
    return x


def init_layer_norm(params: Params, prefix: str, d: int):
    params.add(prefix + ".gain", np.ones(d))
    params.add(prefix + ".bias", np.zeros(d))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(
            f"layer_norm affine shape {gain.shape}/{bias.shape} does not match "
            f"input last extent {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


def layer_norm_p(params: Params, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[prefix + ".gain"], params[prefix + ".bias"])


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention.

    q: [..., Lq, d], k/v: [..., Lk, d]; mask is boolean [Lq, Lk] (or broadcastable),
    True = attend allowed. Disallowed logits receive an additive -1e9.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("attention: fully masked query row has no valid keys")
        scores = scores + np.where(mask, 0.0, MASK_NEG)
    weights = scores.softmax(axis=-1)
    return weights @ v


def init_mha(params: Params, prefix: str, d_model: int, rng: np.random.Generator):
    for name in ("q", "k", "v", "o"):
        init_linear(params, f"{prefix}.{name}", d_model, d_model, rng)


def mha(params: Params, prefix: str, q: Tensor, k: Tensor, v: Tensor,
        n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention over [..., L, d_model] inputs."""
    d_model = q.shape[-1]
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    dh = d_model // n_heads

    def split(t: Tensor) -> Tensor:
        # [..., L, d] -> [..., h, L, dh]
        shp = t.shape[:-1] + (n_heads, dh)
        return t.reshape(shp).swapaxes(-2, -3)

    qh = split(linear(params, f"{prefix}.q", q))
    kh = split(linear(params, f"{prefix}.k", k))
    vh = split(linear(params, f"{prefix}.v", v))
    out = attention(qh, kh, vh, mask=mask)
    out = out.swapaxes(-2, -3)
    out = out.reshape(out.shape[:-2] + (d_model,))
    return linear(params, f"{prefix}.o", out)


def init_gru_cell(params: Params, prefix: str, d_in: int, d_h: int,
                  rng: np.random.Generator):
    for gate in ("z", "r", "n"):
        init_linear(params, f"{prefix}.x{gate}", d_in, d_h, rng)
        init_linear(params, f"{prefix}.h{gate}", d_h, d_h, rng)


def gru_cell(params: Params, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """Standard GRU update; z=1 carries the previous hidden state through."""
    z = (linear(params, f"{prefix}.xz", x) + linear(params, f"{prefix}.hz", h)).sigmoid()
    r = (linear(params, f"{prefix}.xr", x) + linear(params, f"{prefix}.hr", h)).sigmoid()
    n = (linear(params, f"{prefix}.xn", x) + linear(params, f"{prefix}.hn", r * h)).tanh()
    return z * h + (1.0 - z) * n


def init_encoder_layer(params: Params, prefix: str, d_model: int,
                       rng: np.random.Generator):
    init_mha(params, f"{prefix}.attn", d_model, rng)
    init_linear(params, f"{prefix}.ff0", d_model, 4 * d_model, rng)
    init_linear(params, f"{prefix}.ff1", 4 * d_model, d_model, rng)
    init_layer_norm(params, f"{prefix}.ln1", d_model)
    init_layer_norm(params, f"{prefix}.ln2", d_model)


def encoder_layer(params: Params, prefix: str, x: Tensor, n_heads: int,
                  mask: np.ndarray | None = None) -> Tensor:
    """Post-norm transformer encoder layer (self-attention + feed-forward)."""
    a = mha(params, f"{prefix}.attn", x, x, x, n_heads, mask=mask)
    x = layer_norm_p(params, f"{prefix}.ln1", x + a)
    f = linear(params, f"{prefix}.ff1",
               linear(params, f"{prefix}.ff0", x).relu())
    return layer_norm_p(params, f"{prefix}.ln2", x + f)


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    return math.sqrt(total)
