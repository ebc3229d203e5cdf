"""Noise schedule, training objective, classifier-free guidance and DDIM sampling.

Diffusion runs directly in pixel space: an image in [0, 1] maps to
``x0 = 2 * img - 1``. Timesteps are 0-based indices ``t`` in ``[0, T)``, where
index ``t`` corresponds to diffusion step ``t + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import BadRange, BadSteps, ShapeMismatch, TOutOfRange

SeedLike = Union[int, Sequence[int], np.random.Generator]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def build_schedule(T: int, beta_start: float = 5e-4, beta_end: float = 0.1, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise BadRange(f"unsupported schedule kind {kind!r}")
    if T < 1:
        raise BadRange(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise BadRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar)


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise TOutOfRange(f"timesteps must be integers, got {t.dtype}")
    if t.size and (t.min() < 0 or t.max() >= schedule.T):
        raise TOutOfRange(f"timestep outside [0, {schedule.T})")
    return t


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Forward marginal ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one index per leading batch row.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {z0.shape} vs eps {eps.shape}")
    t = _check_t(t, schedule)
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Guided prediction ``eps_uncond + scale * (eps_cond - eps_uncond)``.

    Scales 1 and 0 return the conditional and unconditional inputs unchanged,
    so those identities hold bit for bit.
    """
    c, u = np.asarray(eps_cond), np.asarray(eps_uncond)
    if c.shape != u.shape:
        raise ShapeMismatch(f"eps_cond {c.shape} vs eps_uncond {u.shape}")
    if scale == 1:
        return c.copy()
    if scale == 0:
        return u.copy()
    return (u + scale * (c - u)).astype(np.result_type(c, u))


@dataclass
class MultiViewSample:
    """A training batch: targets, their condition views and relative poses."""

    target: np.ndarray  # [B, 3, H, W] in [0, 1]
    cond_images: np.ndarray  # [B, N, 3, H, W]
    rel_poses: np.ndarray  # [B, N, 4]

    def __len__(self) -> int:
        return len(self.target)


Predictor = Callable[[Tensor, np.ndarray, Tensor], Tensor]


def loss_step(
    model,
    sample: MultiViewSample,
    schedule: NoiseSchedule,
    p_uncond: float,
    rng: np.random.Generator,
    predictor: Optional[Predictor] = None,
) -> Tensor:
    """Noise-prediction MSE for one batch.

    Draws ``t`` uniformly over the schedule, ``eps ~ N(0, 1)`` and, with
    probability ``p_uncond`` per row, swaps the context for the null sequence.
    ``predictor`` replaces the model's noise prediction (for testing).
    """
    if not 0 <= p_uncond < 1:
        raise BadRange(f"p_uncond must be in [0, 1), got {p_uncond}")
    b = len(sample)
    x0 = sample.target.astype(np.float64) * 2.0 - 1.0
    t = rng.integers(0, schedule.T, size=b)
    eps = rng.standard_normal(x0.shape)
    drop = rng.random(b) < p_uncond
    z_t = Tensor(q_sample(x0, t, eps, schedule), dtype=model.dtype)
    context = model.conditioned(sample.cond_images, sample.rel_poses, drop)
    eps_hat = (predictor or model)(z_t, t, context)
    return ag.mse(eps_hat, Tensor(eps, dtype=model.dtype))


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending subsequence of ``steps`` indices from ``T - 1`` down to 0."""
    if not 1 <= steps <= T:
        raise BadSteps(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(0, T - 1, steps)).astype(int)[::-1]


def sample_ddim(
    model,
    context: Tensor,
    schedule: NoiseSchedule,
    steps: int,
    scale: float,
    seed: SeedLike,
    null: Optional[Tensor] = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling with classifier-free guidance.

    ``context`` is ``[B, L, d]``; returns ``[B, 3, H, W]`` images in [0, 1].
    At each step the predicted ``x0`` is clipped to [-1, 1] and the noise
    estimate recomputed from it. When ``scale == 1`` the unconditional pass is
    skipped, since guidance reduces to the conditional prediction.
    """
    ts = ddim_timesteps(schedule.T, steps)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    b = context.shape[0]
    res = model.resolution
    z = rng.standard_normal((b, 3, res, res))
    ab = schedule.alpha_bar
    with no_grad():
        if scale != 1:
            null = model.batched_null(b) if null is None else null
            both = ag.concat([context, null], axis=0)
        for i, t in enumerate(ts):
            zin = Tensor(z, dtype=model.dtype)
            if scale == 1:
                eps = model(zin, np.full(b, t), context).numpy().astype(np.float64)
            else:
                out = model(ag.concat([zin, zin], axis=0), np.full(2 * b, t), both).numpy()
                eps = cfg_combine(out[:b], out[b:], scale).astype(np.float64)
            a_t = ab[t]
            a_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0 = np.clip((z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t), -1.0, 1.0)
            eps = (z - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)
            z = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
