"""The full view-conditioned denoiser: conditioner plus UNet.

The UNet output is preconditioned so that its regression target has unit
variance at every noise level::

    eps_hat = g * c_skip(t) * z + c_out(t) * F(c_in(t) * z, t, context)

with ``s2 = 1 - alpha_bar``, ``v = alpha_bar * SIGMA_DATA**2 + s2``,
``c_skip = sqrt(s2) / v``, ``c_out = sqrt(alpha_bar) * SIGMA_DATA / sqrt(v)`` and
``c_in = 1 / sqrt(v)``. At low noise F predicts the noise itself; at high noise
it predicts (minus) the scaled clean image, so its errors are not blown up by
``1 / sqrt(alpha_bar)`` when the sampler recovers ``x0``. The loss is still the
plain noise MSE. ``g`` is a learned per-channel gain on the skip path. It starts
at zero (as does F's output layer), so an untrained model predicts zero noise
and training starts from unit loss.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .conditioning import Conditioner, ContextSequence, mix_null, null_context
from .config import ModelConfig, RunConfig
from .diffusion import NoiseSchedule, build_schedule
from .errors import ShapeMismatch, TOutOfRange
from .nn import Module
from .unet import UNet

SIGMA_DATA = 0.5  # assumed std of the clean pixels in [-1, 1]


def precondition(alpha_bar: np.ndarray, sigma_data: float = SIGMA_DATA):
    """``(c_skip, c_out, c_in)`` arrays for each entry of ``alpha_bar``."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    s2 = 1.0 - ab
    v = ab * sigma_data**2 + s2
    return np.sqrt(s2) / v, np.sqrt(ab) * sigma_data / np.sqrt(v), 1.0 / np.sqrt(v)


class ViewDiffusionModel(Module):
    def __init__(
        self,
        cfg: ModelConfig,
        resolution: int,
        rng: np.random.Generator,
        dtype=np.float32,
        schedule: NoiseSchedule | None = None,
    ):
        self.conditioner = Conditioner(rng, resolution, cfg.d_ctx, cfg.d_embed, cfg.n_tok, dtype)
        self.unet = UNet(rng, cfg.d_ctx, tuple(cfg.channels), cfg.groups, dtype=dtype)
        self.skip_gain = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True, dtype=dtype)
        self.mode = cfg.mode
        self.views = cfg.views
        self.view_mode = cfg.view_mode
        self.resolution = resolution
        self.dtype = np.dtype(dtype)
        schedule = schedule or build_schedule(200)
        self.c_skip, self.c_out, self.c_in = precondition(schedule.alpha_bar)

    @classmethod
    def from_config(cls, cfg: RunConfig, dtype=np.float32) -> "ViewDiffusionModel":
        s = cfg.schedule
        schedule = build_schedule(s.timesteps, s.beta_start, s.beta_end, s.kind)
        return cls(cfg.model, cfg.dataset.resolution, np.random.default_rng([cfg.seed, 3]), dtype, schedule)

    def context(self, cond_images: np.ndarray, rel_poses: np.ndarray) -> ContextSequence:
        """Batched context from ``[B, N, 3, H, W]`` images and ``[B, N, 4]`` poses."""
        cond_images = np.asarray(cond_images)
        rel_poses = np.asarray(rel_poses)
        if cond_images.ndim != 5 or cond_images.shape[1] != self.views:
            raise ShapeMismatch(f"expected [B, {self.views}, 3, H, W] condition images, got {cond_images.shape}")
        if rel_poses.shape != cond_images.shape[:2] + (4,):
            raise ShapeMismatch(f"pose features {rel_poses.shape} do not match images {cond_images.shape}")
        imgs = [Tensor(cond_images[:, i], dtype=self.dtype) for i in range(self.views)]
        poses = [Tensor(rel_poses[:, i], dtype=self.dtype) for i in range(self.views)]
        return self.conditioner(imgs, poses, self.mode, self.view_mode)

    def null_tokens(self) -> Tensor:
        """Unconditional ``[L, d_ctx]`` sequence for this model's mode."""
        return null_context(self.mode, self.conditioner, self.views, self.view_mode).tokens

    def batched_null(self, batch: int) -> Tensor:
        null = self.null_tokens()
        return ag.concat([ag.reshape(null, (1,) + null.shape)] * batch, axis=0)

    def conditioned(self, cond_images, rel_poses, drop=None) -> Tensor:
        """Context tokens with rows flagged in ``drop`` swapped for the null sequence."""
        tokens = self.context(cond_images, rel_poses).tokens
        if drop is not None:
            tokens = mix_null(tokens, self.null_tokens(), drop)
        return tokens

    def forward(self, z_t: Tensor, t: np.ndarray, context: Tensor) -> Tensor:
        t = np.asarray(t)
        if t.min() < 0 or t.max() >= len(self.c_in):
            raise TOutOfRange(f"timesteps must lie in [0, {len(self.c_in)}), got {t.min()}..{t.max()}")
        coef = lambda c: Tensor(c[t].reshape(-1, 1, 1, 1), dtype=self.dtype)  # noqa: E731
        out = self.unet(ag.mul(z_t, coef(self.c_in)), t, context)
        skip = ag.mul(ag.mul(z_t, coef(self.c_skip)), self.skip_gain)
        return ag.add(skip, ag.mul(out, coef(self.c_out)))
