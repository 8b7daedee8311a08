"""Attention rollout and top-R local query selection.

Rollout works on detached numpy arrays: selection is discrete, so no
gradient flows through it. Functions accept a single (n, n) map or a batch
(B, n, n).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError


@dataclass
class RolloutMap:
    s_hat: np.ndarray  # (n, n) or (B, n, n)
    layer_index: int  # 1-based depth of the newest layer folded in


@dataclass
class LocalSelection:
    indices: np.ndarray  # (k+1,) or (B, k+1); token rows, CLS (0) first then by response
    ratio: float
    responses: np.ndarray  # (N,) or (B, N)


def renormalize(s: np.ndarray) -> np.ndarray:
    """0.5*S + 0.5*I: account for the residual connection."""
    s = np.asarray(s)
    return 0.5 * s + 0.5 * np.eye(s.shape[-1], dtype=s.dtype)


def rollout(maps: Sequence[np.ndarray], upto: int | None = None) -> RolloutMap:
    """Accumulate renormalised attention: S_hat_i = Sbar_i @ Sbar_{i-1} @ ... @ Sbar_1."""
    maps = list(maps)
    if not maps:
        raise ValueError("rollout needs at least one attention map")
    upto = len(maps) if upto is None else upto
    if not 1 <= upto <= len(maps):
        raise ValueError(f"layer {upto} outside 1..{len(maps)}")
    shape = np.shape(maps[0])
    if shape[-1] != shape[-2]:
        raise ShapeError(f"attention maps must be square, got {shape}")
    acc = renormalize(maps[0])
    for i, s in enumerate(maps[1:upto], start=2):
        if np.shape(s) != shape:
            raise ShapeError(f"layer {i} map {np.shape(s)} does not match layer 1 map {shape}")
        acc = renormalize(s) @ acc
    return RolloutMap(acc, upto)


def cls_response(m: RolloutMap | np.ndarray) -> np.ndarray:
    """Accumulated CLS-row weights over the patch tokens (CLS-to-CLS entry dropped)."""
    s_hat = m.s_hat if isinstance(m, RolloutMap) else np.asarray(m)
    return s_hat[..., 0, 1:]


def num_selected(num_patches: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"selection ratio must lie in (0, 1], got {ratio}")
    # nudge absorbs products like 0.3 * 10 = 2.9999999999999996
    return max(1, int(np.floor(ratio * num_patches + 1e-9)))


def select_local_queries(responses: np.ndarray, ratio: float) -> LocalSelection:
    """Top-k patch tokens by response (ties -> lower index), CLS prepended."""
    responses = np.asarray(responses)
    k = num_selected(responses.shape[-1], ratio)
    order = np.argsort(-responses, axis=-1, kind="stable")[..., :k] + 1
    cls = np.zeros(order.shape[:-1] + (1,), dtype=order.dtype)
    return LocalSelection(np.concatenate([cls, order], axis=-1), ratio, responses)
