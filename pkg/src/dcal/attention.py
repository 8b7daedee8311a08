"""Scaled dot-product attention, multi-head attention and the pre-LN encoder block."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MLP_RATIO = 4


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class EncoderBlockParams:
    ln1: LayerNormParams
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2: LayerNormParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, LayerNormParams):
                out[f"{prefix}.{f.name}.gamma"] = value.gamma
                out[f"{prefix}.{f.name}.beta"] = value.beta
            else:
                out[f"{prefix}.{f.name}"] = value
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], prefix: str) -> "EncoderBlockParams":
        kwargs = {}
        for f in fields(cls):
            if f.name in ("ln1", "ln2"):
                kwargs[f.name] = LayerNormParams(
                    named[f"{prefix}.{f.name}.gamma"], named[f"{prefix}.{f.name}.beta"]
                )
            else:
                kwargs[f.name] = named[f"{prefix}.{f.name}"]
        return cls(**kwargs)


def block_shapes(dim: int) -> dict[str, tuple[int, ...]]:
    hidden = MLP_RATIO * dim
    return {
        "ln1.gamma": (dim,),
        "ln1.beta": (dim,),
        "wq": (dim, dim),
        "wk": (dim, dim),
        "wv": (dim, dim),
        "wo": (dim, dim),
        "bo": (dim,),
        "ln2.gamma": (dim,),
        "ln2.beta": (dim,),
        "w1": (dim, hidden),
        "b1": (hidden,),
        "w2": (hidden, dim),
        "b2": (dim,),
    }


def init_layer_norm(dim: int, dtype=np.float32) -> LayerNormParams:
    return LayerNormParams(
        Tensor(np.ones(dim), requires_grad=True, dtype=dtype),
        Tensor(np.zeros(dim), requires_grad=True, dtype=dtype),
    )


def init_block(dim: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
    """Weights ~ N(0, std^2); biases zero; LayerNorm affine identity."""
    hidden = MLP_RATIO * dim

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)

    def z(n):
        return Tensor(np.zeros(n), requires_grad=True, dtype=dtype)

    return EncoderBlockParams(
        ln1=init_layer_norm(dim, dtype),
        wq=w(dim, dim),
        wk=w(dim, dim),
        wv=w(dim, dim),
        wo=w(dim, dim),
        bo=z(dim),
        ln2=init_layer_norm(dim, dtype),
        w1=w(dim, hidden),
        b1=z(hidden),
        w2=w(hidden, dim),
        b2=z(dim),
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d)) V. Returns (output, weights).

    The query count may differ from the key count; leading batch/head axes
    broadcast.
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"query width {d} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    weights = T.row_softmax(scores)
    return weights @ v, weights


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, D) -> (..., H, n, D/H); head h owns columns [h*d, (h+1)*d)."""
    *lead, n, dim = x.shape
    if dim % heads:
        raise ShapeError(f"width {dim} is not divisible by {heads} heads")
    return T.swapaxes(T.reshape(x, (*lead, n, heads, dim // heads)), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, d = x.shape
    return T.reshape(T.swapaxes(x, -2, -3), (*lead, n, heads * d))


def project_qkv(xn: Tensor, p: EncoderBlockParams, heads: int):
    return (
        split_heads(xn @ p.wq, heads),
        split_heads(xn @ p.wk, heads),
        split_heads(xn @ p.wv, heads),
    )


def attend_heads(q: Tensor, k: Tensor, v: Tensor, p: EncoderBlockParams) -> tuple[Tensor, Tensor]:
    out, weights = scaled_dot_attention(q, k, v)
    return merge_heads(out) @ p.wo + p.bo, weights


def multi_head_attention(x: Tensor, p: EncoderBlockParams, heads: int) -> tuple[Tensor, Tensor]:
    """Returns (Y, per-head weights of shape (..., H, n, n))."""
    if p.dim % heads:
        raise ShapeError(f"width {p.dim} is not divisible by {heads} heads")
    q, k, v = project_qkv(x, p, heads)
    return attend_heads(q, k, v, p)


def feed_forward(x: Tensor, p: EncoderBlockParams) -> Tensor:
    return T.gelu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def drop_path(x: Tensor, drop_prob: float, rng: np.random.Generator | None) -> Tensor:
    """Zero the whole residual branch per sample with probability ``drop_prob``.

    Identity when ``drop_prob`` is 0 or no rng is given (inference). A 2-D
    input is one sample; otherwise the leading axis is the batch.
    """
    if drop_prob <= 0.0 or rng is None:
        return x
    if not drop_prob < 1.0:
        raise ValueError(f"drop_prob must be < 1, got {drop_prob}")
    keep = 1.0 - drop_prob
    shape = () if x.ndim == 2 else (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    return x * Tensor(mask, dtype=x.dtype)


def encoder_block(
    x: Tensor,
    p: EncoderBlockParams,
    heads: int,
    drop_prob: float = 0.0,
    rng: np.random.Generator | None = None,
    return_kv: bool = False,
):
    """Pre-LN transformer block: x + MSA(LN(x)), then + FFN(LN(.)).

    Returns (x', per-head attention) or, with ``return_kv``, also the
    head-split keys and values computed from LN1(x).
    """
    xn = T.layer_norm(x, p.ln1.gamma, p.ln1.beta)
    q, k, v = project_qkv(xn, p, heads)
    attn, weights = attend_heads(q, k, v, p)
    x = x + drop_path(attn, drop_prob, rng)
    x = x + drop_path(feed_forward(T.layer_norm(x, p.ln2.gamma, p.ln2.beta), p), drop_prob, rng)
    if return_kv:
        return x, weights, (k, v)
    return x, weights


def head_average(weights) -> np.ndarray:
    """Mean over the head axis (second to last but two) of detached weights."""
    data = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    return data.mean(axis=-3)


def drop_schedule(depth: int, drop_max: float) -> list[float]:
    """Linear stochastic-depth schedule from 0 (first block) to ``drop_max`` (last)."""
    if depth == 1:
        return [0.0]
    return [drop_max * i / (depth - 1) for i in range(depth)]
