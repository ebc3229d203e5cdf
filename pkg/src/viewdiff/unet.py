"""Two-resolution UNet noise predictor with one spatial-transformer block.

The input is first folded 2x2 into channels (space-to-depth), so the two
working resolutions are H/2 and H/4; the output is unfolded the same way.
Layout (c1, c2 = channel widths)::

    fold -> conv_in -> ResBlock(c1) ------------------------------+ skip
            -> stride-2 conv (c2) -> ResBlock(c2)          |
            -> SpatialTransformer(c2, context)             |
            -> upsample -> concat(skip) -> ResBlock(c1) <--+
            -> GroupNorm -> SiLU -> conv_out (zero init) -> unfold

The transformer sits at the lower resolution. Its cross-attention takes
queries from the hidden state and keys/values from the conditioning context.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeMismatch
from .nn import Attention, Conv2d, GroupNorm, LayerNorm, Linear, Module


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``[B, dim]``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return Tensor(emb, dtype=dtype)


def to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    b, _, c = x.shape
    return ag.transpose(ag.reshape(x, (b, h, w, c)), (0, 3, 1, 2))


def space_to_depth(x: Tensor, r: int = 2) -> Tensor:
    b, c, h, w = x.shape
    x = ag.reshape(x, (b, c, h // r, r, w // r, r))
    return ag.reshape(ag.transpose(x, (0, 1, 3, 5, 2, 4)), (b, c * r * r, h // r, w // r))


def depth_to_space(x: Tensor, r: int = 2) -> Tensor:
    b, c, h, w = x.shape
    x = ag.reshape(x, (b, c // (r * r), r, r, h, w))
    return ag.reshape(ag.transpose(x, (0, 1, 4, 2, 5, 3)), (b, c // (r * r), h * r, w * r))


class ResBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int, d_time: int, groups: int, dtype=np.float32):
        self.norm1 = GroupNorm(groups, c_in, dtype)
        self.conv1 = Conv2d(rng, c_in, c_out, 3, dtype=dtype)
        self.time = Linear(rng, d_time, c_out, dtype=dtype)
        self.norm2 = GroupNorm(groups, c_out, dtype)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, dtype=dtype)
        self.skip = Conv2d(rng, c_in, c_out, 1, dtype=dtype) if c_in != c_out else None

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ag.silu(self.norm1(x)))
        tb = self.time(ag.silu(temb))
        h = ag.add(h, ag.reshape(tb, tb.shape + (1, 1)))
        h = self.conv2(ag.silu(self.norm2(h)))
        return ag.add(self.skip(x) if self.skip is not None else x, h)


class SpatialTransformer(Module):
    """Self-attention, cross-attention and feed-forward over spatial tokens.

    Each sublayer is pre-norm with its own residual add, and the whole block is
    wrapped in an outer residual: ``out = x + proj_out(transformer(proj_in(x)))``.

    After every forward pass ``last_cross`` holds the cross-attention sublayer
    output and ``last_cross_weights`` its attention matrix (numpy copies), which
    the degeneracy diagnostics inspect.
    """

    def __init__(self, rng, channels: int, d_context: int, groups: int, dtype=np.float32):
        self.norm = GroupNorm(groups, channels, dtype)
        self.proj_in = Linear(rng, channels, channels, dtype=dtype)
        self.ln1 = LayerNorm(channels, dtype)
        self.self_attn = Attention(rng, channels, dtype=dtype)
        self.ln2 = LayerNorm(channels, dtype)
        self.cross_attn = Attention(rng, channels, d_context, dtype=dtype)
        self.ln3 = LayerNorm(channels, dtype)
        self.ff1 = Linear(rng, channels, 4 * channels, dtype=dtype)
        self.ff2 = Linear(rng, 4 * channels, channels, dtype=dtype)
        self.proj_out = Linear(rng, channels, channels, dtype=dtype)
        self.last_cross: Optional[np.ndarray] = None
        self.last_cross_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        _, _, h, w = x.shape
        tok = self.proj_in(to_tokens(self.norm(x)))
        tok = ag.add(tok, self.self_attn(self.ln1(tok)))
        cross, weights = self.cross_attn(self.ln2(tok), context, return_weights=True)
        self.last_cross = cross.numpy()
        self.last_cross_weights = weights.numpy()
        tok = ag.add(tok, cross)
        tok = ag.add(tok, self.ff2(ag.silu(self.ff1(self.ln3(tok)))))
        return ag.add(x, from_tokens(self.proj_out(tok), h, w))


class UNet(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        d_context: int,
        channels: tuple[int, int] = (32, 64),
        groups: int = 8,
        in_channels: int = 3,
        dtype=np.float32,
    ):
        c1, c2 = channels
        d_time = 4 * c1
        self.c1 = c1
        self.dtype = np.dtype(dtype)
        self.in_channels = in_channels
        self.conv_in = Conv2d(rng, 4 * in_channels, c1, 3, dtype=dtype)
        self.time1 = Linear(rng, c1, d_time, dtype=dtype)
        self.time2 = Linear(rng, d_time, d_time, dtype=dtype)
        self.down_block = ResBlock(rng, c1, c1, d_time, groups, dtype)
        self.down = Conv2d(rng, c1, c2, 3, stride=2, dtype=dtype)
        self.mid_block = ResBlock(rng, c2, c2, d_time, groups, dtype)
        self.transformer = SpatialTransformer(rng, c2, d_context, groups, dtype)
        self.up_block = ResBlock(rng, c2 + c1, c1, d_time, groups, dtype)
        self.norm_out = GroupNorm(groups, c1, dtype)
        self.conv_out = Conv2d(rng, c1, 4 * in_channels, 3, dtype=dtype, zero=True)

    def forward(self, x: Tensor, t: np.ndarray, context: Tensor) -> Tensor:
        """``x``: ``[B, 3, H, W]``; ``t``: ``[B]`` integer steps; ``context``: ``[B, L, d_ctx]``."""
        temb = timestep_embedding(np.asarray(t), self.c1, self.dtype)
        temb = self.time2(ag.silu(self.time1(temb)))
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeMismatch(f"expected [B, {self.in_channels}, H, W] with H, W divisible by 4, got {x.shape}")
        skip = self.down_block(self.conv_in(space_to_depth(x)), temb)
        h = self.mid_block(self.down(skip), temb)
        h = self.transformer(h, context)
        h = ag.concat([ag.upsample2x(h), skip], axis=1)
        h = self.up_block(h, temb)
        return depth_to_space(self.conv_out(ag.silu(self.norm_out(h))))
