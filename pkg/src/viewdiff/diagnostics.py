"""Checks for query-independence of cross-attention.

With a single context token the softmax over keys is identically 1, so every
query receives the same value vector and the Q/K projections have no effect.
:func:`check_degeneracy` measures this on live weights by feeding pairs of
random hidden states through a cross-attention module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .autograd import Tensor, no_grad
from .conditioning import ContextSequence
from .errors import ShapeMismatch
from .nn import Attention

DEGENERATE_TOL = 1e-12


@dataclass
class DegeneracyReport:
    L: int
    max_weight_dev: float
    max_output_delta: float
    verdict: str
    trials: int = 1
    min_output_delta: float = 0.0

    def to_dict(self) -> dict:
        return {
            "L": self.L,
            "max_weight_dev": self.max_weight_dev,
            "max_output_delta": self.max_output_delta,
            "verdict": self.verdict,
        }


def verdict_for(max_output_delta: float) -> str:
    return "degenerate" if max_output_delta <= DEGENERATE_TOL else "expressive"


def _tokens(ctx: Union[ContextSequence, Tensor, np.ndarray], dtype) -> Tensor:
    if isinstance(ctx, ContextSequence):
        ctx = ctx.tokens
    if not isinstance(ctx, Tensor):
        ctx = Tensor(np.asarray(ctx), dtype=dtype)
    if ctx.ndim not in (2, 3):
        raise ShapeMismatch(f"context must be [L, d] or [B, L, d], got {ctx.shape}")
    return ctx


def check_degeneracy(
    attn: Attention, ctx, trials: int = 8, seed: int = 0, seq_len: int = 16
) -> DegeneracyReport:
    """Compare cross-attention outputs for pairs of unit-Gaussian hidden states.

    ``max_weight_dev`` is the largest deviation of any attention weight from the
    uniform value ``1 / L``; ``max_output_delta`` the largest max-abs output
    difference over all pairs.
    """
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    dtype = attn.to_q.weight.dtype
    tokens = _tokens(ctx, dtype)
    L = tokens.shape[-2]
    d_model = attn.to_q.weight.shape[0]
    shape = tokens.shape[:-2] + (seq_len, d_model)
    rng = np.random.default_rng(seed)
    weight_dev, deltas = 0.0, []
    with no_grad():
        for _ in range(trials):
            h1 = Tensor(rng.standard_normal(shape), dtype=dtype)
            h2 = Tensor(rng.standard_normal(shape), dtype=dtype)
            o1, w1 = attn(h1, tokens, return_weights=True)
            o2, w2 = attn(h2, tokens, return_weights=True)
            w = np.concatenate([w1.numpy().ravel(), w2.numpy().ravel()]).astype(np.float64)
            weight_dev = max(weight_dev, float(np.abs(w - 1.0 / L).max()))
            deltas.append(float(np.abs(o1.numpy().astype(np.float64) - o2.numpy()).max()))
    worst = max(deltas)
    return DegeneracyReport(L, weight_dev, worst, verdict_for(worst), trials, min(deltas))


def attention_entropy(attn: Attention, ctx, hidden) -> np.ndarray:
    """Shannon entropy (nats) of each query's attention distribution, shape ``[..., S]``."""
    dtype = attn.to_q.weight.dtype
    tokens = _tokens(ctx, dtype)
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(np.asarray(hidden), dtype=dtype)
    if hidden.ndim != tokens.ndim or hidden.shape[-1] != attn.to_q.weight.shape[0]:
        raise ShapeMismatch(f"hidden {hidden.shape} does not fit attention over {tokens.shape}")
    with no_grad():
        w = attn.weights(hidden, tokens).numpy().astype(np.float64)
    logw = np.log(np.where(w > 0, w, 1.0))
    return -(w * logw).sum(axis=-1)


def max_entropy(L: int) -> float:
    return math.log(L)
