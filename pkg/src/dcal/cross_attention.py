"""Global-local cross-attention (GLCA) and pair-wise cross-attention (PWCA)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (
    EncoderBlockParams,
    attend_heads,
    drop_path,
    feed_forward,
    merge_heads,
    project_qkv,
    scaled_dot_attention,
    split_heads,
)
from .rollout import LocalSelection
from .tensor import ShapeError, Tensor


def glca(q_local: Tensor, k_global: Tensor, v_global: Tensor) -> Tensor:
    """Selected local queries attend over the full global key/value set."""
    return scaled_dot_attention(q_local, k_global, v_global)[0]


def _select_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    n = x.shape[-2]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise IndexError(f"selection index out of range for {n} tokens")
    if x.ndim == 2:
        return T.take(x, indices, axis=0)
    return T.take_rows(x, indices)


def glca_block(
    x: Tensor, sel: LocalSelection | np.ndarray, p: EncoderBlockParams, heads: int
) -> Tensor:
    """Encoder block whose queries are restricted to the selected rows.

    Keys and values come from every row of LN1(x); the residual carries only
    the selected rows. Output has k+1 rows (CLS first).
    """
    indices = np.asarray(sel.indices if isinstance(sel, LocalSelection) else sel)
    xn = T.layer_norm(x, p.ln1.gamma, p.ln1.beta)
    q = split_heads(_select_rows(xn, indices) @ p.wq, heads)
    k = split_heads(xn @ p.wk, heads)
    v = split_heads(xn @ p.wv, heads)
    attn, _ = attend_heads(q, k, v, p)
    y = _select_rows(x, indices) + attn
    return y + feed_forward(T.layer_norm(y, p.ln2.gamma, p.ln2.beta), p)


def pwca(q1: Tensor, k1: Tensor, v1: Tensor, k2: Tensor, v2: Tensor) -> Tensor:
    """Target queries attend over the stacked keys/values of both images;
    all 2N+2 scores share one softmax."""
    if k1.shape != k2.shape or v1.shape != v2.shape:
        raise ShapeError(f"pair shapes differ: K {k1.shape} vs {k2.shape}, V {v1.shape} vs {v2.shape}")
    k = T.concat([k1, k2], axis=-2)
    v = T.concat([v1, v2], axis=-2)
    return scaled_dot_attention(q1, k, v)[0]


def pwca_block_kv(
    x1: Tensor,
    kv2: tuple[Tensor, Tensor],
    p: EncoderBlockParams,
    heads: int,
    drop_prob: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """PWCA block given the distractor's head-split keys and values."""
    xn = T.layer_norm(x1, p.ln1.gamma, p.ln1.beta)
    q1, k1, v1 = project_qkv(xn, p, heads)
    k2, v2 = kv2
    out = pwca(q1, k1, v1, k2, v2)
    attn = merge_heads(out) @ p.wo + p.bo
    x1 = x1 + drop_path(attn, drop_prob, rng)
    return x1 + drop_path(feed_forward(T.layer_norm(x1, p.ln2.gamma, p.ln2.beta), p), drop_prob, rng)


def distractor_kv(x2: Tensor, p: EncoderBlockParams, heads: int) -> tuple[Tensor, Tensor]:
    xn = T.layer_norm(x2, p.ln1.gamma, p.ln1.beta)
    return split_heads(xn @ p.wk, heads), split_heads(xn @ p.wv, heads)


def pwca_block(
    x1: Tensor,
    x2: Tensor,
    p: EncoderBlockParams,
    heads: int,
    drop_prob: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encoder block for the target ``x1`` with ``x2`` as distractor.

    ``p`` is the SA block's own parameter object. Residual and FFN touch
    ``x1`` only.
    """
    return pwca_block_kv(x1, distractor_kv(x2, p, heads), p, heads, drop_prob, rng)
