"""Context sequences the UNet cross-attends to.

Three layouts are built from condition images and relative poses:

* mode ``a`` (legacy): pooled image embedding and pose joined side by side and
  projected to a single token, so ``L = 1``;
* mode ``b`` (revamped): the encoder's token grid with a projected pose token
  appended as the last row, so ``L = n_tok + 1``;
* mode ``c`` (multi-view): per-view contexts of mode ``a`` or ``b`` stacked
  row-wise in input order.

All builders work on a batch: images ``[B, 3, H, W]``, poses ``[B, 4]`` and
tokens ``[B, L, d_ctx]``. Unbatched inputs (``[3, H, W]`` and ``[4]``) give
``[L, d_ctx]`` tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import EmptyViewList, ShapeMismatch
from .nn import Conv2d, Linear, Module, _param

POSE_DIM = 4


@dataclass
class ContextSequence:
    tokens: Tensor
    mode: str
    provenance: list[tuple[int, tuple[int, int]]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


class ImageEncoder(Module):
    """Strided conv stack producing a token grid and a pooled embedding.

    Each stage halves the resolution; the last stage has ``d_ctx`` channels
    and a ``sqrt(n_tok)`` square grid. The pooled embedding is a linear head on
    the mean token. There is no input shift and the hidden activation is SiLU,
    so an all-zero image with zero biases maps to all-zero tokens.
    """

    def __init__(self, rng, resolution: int, d_ctx: int, d_embed: int, n_tok: int, dtype=np.float32):
        grid = math.isqrt(n_tok)
        if grid * grid != n_tok or resolution % grid:
            raise ShapeMismatch(f"n_tok={n_tok} does not tile a {resolution}px image")
        n_stages = int(round(math.log2(resolution // grid)))
        if 2**n_stages * grid != resolution or n_stages < 1:
            raise ShapeMismatch(f"resolution / sqrt(n_tok) must be a power of two >= 2")
        widths = [min(16 * 2**i, d_ctx) for i in range(n_stages - 1)] + [d_ctx]
        self.resolution = resolution
        self.n_tok = n_tok
        self.stages = []
        c_in = 3
        for w in widths:
            self.stages.append(Conv2d(rng, c_in, w, 3, stride=2, dtype=dtype))
            c_in = w
        self.pool = Linear(rng, d_ctx, d_embed, dtype=dtype)

    def features(self, img: Tensor) -> list[Tensor]:
        """Activations of every stage, ``[B, C_i, H_i, W_i]``."""
        if img.ndim != 4 or img.shape[1:] != (3, self.resolution, self.resolution):
            raise ShapeMismatch(f"expected [B, 3, {self.resolution}, {self.resolution}], got {img.shape}")
        feats = []
        h = img
        for i, conv in enumerate(self.stages):
            h = conv(h)
            if i < len(self.stages) - 1:
                h = ag.silu(h)
            feats.append(h)
        return feats

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(pooled [B, d_embed], tokens [B, n_tok, d_ctx])``."""
        grid = self.features(img)[-1]
        b, c, h, w = grid.shape
        tokens = ag.reshape(ag.transpose(grid, (0, 2, 3, 1)), (b, h * w, c))
        return self.pool(ag.mean(tokens, axis=1)), tokens


class ContextProjector(Module):
    """Projection heads and learned null sequences."""

    def __init__(self, rng, d_embed: int, d_ctx: int, n_tok: int, dtype=np.float32):
        self.legacy = Linear(rng, d_embed + POSE_DIM, d_ctx, dtype=dtype)
        self.pose = Linear(rng, POSE_DIM, d_ctx, dtype=dtype)
        self.null_a = _param(rng.normal(0.0, 0.02, size=(1, d_ctx)), dtype)
        self.null_b = _param(rng.normal(0.0, 0.02, size=(n_tok + 1, d_ctx)), dtype)
        pose_block = self.legacy.weight.numpy()[d_embed:].astype(np.float64)
        # distinct poses must reach distinct legacy tokens
        assert np.linalg.matrix_rank(pose_block) == min(POSE_DIM, d_ctx)


class Conditioner(Module):
    def __init__(self, rng, resolution: int, d_ctx: int = 64, d_embed: int = 64, n_tok: int = 16,
                 dtype=np.float32):
        self.encoder = ImageEncoder(rng, resolution, d_ctx, d_embed, n_tok, dtype)
        self.projector = ContextProjector(rng, d_embed, d_ctx, n_tok, dtype)
        self.d_ctx = d_ctx
        self.n_tok = n_tok
        self.dtype = np.dtype(dtype)

    def view_length(self, mode: str) -> int:
        return 1 if mode == "a" else self.n_tok + 1

    def forward(self, images, poses, mode: str, view_mode: str = "b") -> ContextSequence:
        """Context for ``N`` views; ``images`` / ``poses`` are length-``N`` lists."""
        if mode == "c":
            return build_context_multiview(list(zip(images, poses)), self, view_mode)
        if len(images) != 1:
            raise ShapeMismatch(f"mode {mode} takes one condition view, got {len(images)}")
        builder = build_context_legacy if mode == "a" else build_context_revamped
        return builder(images[0], poses[0], self)


def _batched(img, pose, dtype) -> tuple[Tensor, Tensor, bool]:
    img = img if isinstance(img, Tensor) else Tensor(np.asarray(img), dtype=dtype)
    pose = pose if isinstance(pose, Tensor) else Tensor(np.asarray(pose), dtype=dtype)
    single = img.ndim == 3
    if single:
        img = ag.reshape(img, (1,) + img.shape)
        pose = ag.reshape(pose, (1,) + pose.shape)
    if pose.ndim != 2 or pose.shape != (img.shape[0], POSE_DIM):
        raise ShapeMismatch(f"pose features {pose.shape} do not match {img.shape[0]} images")
    return img, pose, single


def _finish(tokens: Tensor, single: bool) -> Tensor:
    return ag.reshape(tokens, tokens.shape[1:]) if single else tokens


def encode_image(img, cond: Conditioner) -> tuple[Tensor, Tensor]:
    """Pooled embedding and token grid of one image or a batch."""
    img = img if isinstance(img, Tensor) else Tensor(np.asarray(img), dtype=cond.dtype)
    if img.ndim == 3:
        pooled, tokens = cond.encoder(ag.reshape(img, (1,) + img.shape))
        return ag.reshape(pooled, pooled.shape[1:]), ag.reshape(tokens, tokens.shape[1:])
    return cond.encoder(img)


def build_context_legacy(img, rel_pose, cond: Conditioner) -> ContextSequence:
    img, pose, single = _batched(img, rel_pose, cond.dtype)
    pooled, _ = cond.encoder(img)
    token = cond.projector.legacy(ag.concat([pooled, pose], axis=1))
    tokens = ag.reshape(token, (token.shape[0], 1, token.shape[1]))
    return ContextSequence(_finish(tokens, single), "a", [(0, (0, 1))])


def build_context_revamped(img, rel_pose, cond: Conditioner) -> ContextSequence:
    img, pose, single = _batched(img, rel_pose, cond.dtype)
    _, tokens = cond.encoder(img)
    pose_tok = cond.projector.pose(pose)
    pose_tok = ag.reshape(pose_tok, (pose_tok.shape[0], 1, pose_tok.shape[1]))
    tokens = ag.concat_rows([tokens, pose_tok])
    return ContextSequence(_finish(tokens, single), "b", [(0, (0, tokens.shape[-2]))])


def build_context_multiview(views: Sequence[tuple], cond: Conditioner, view_mode: str = "b") -> ContextSequence:
    """Row-wise concatenation of per-view contexts, in input order."""
    if not views:
        raise EmptyViewList("multi-view context needs at least one view")
    builder = build_context_legacy if view_mode == "a" else build_context_revamped
    parts, spans, start = [], [], 0
    for i, (img, pose) in enumerate(views):
        seq = builder(img, pose, cond)
        parts.append(seq.tokens)
        spans.append((i, (start, start + seq.length)))
        start += seq.length
    tokens = parts[0] if len(parts) == 1 else ag.concat_rows(parts)
    return ContextSequence(tokens, "c", spans)


def null_context(mode: str, cond: Conditioner, views: int = 1, view_mode: str = "b") -> ContextSequence:
    """The learned unconditional sequence with the same length as ``mode``'s contexts."""
    proj = cond.projector
    if mode == "a":
        return ContextSequence(proj.null_a, "a", [(0, (0, 1))])
    if mode == "b":
        return ContextSequence(proj.null_b, "b", [(0, (0, cond.n_tok + 1))])
    per_view = proj.null_a if view_mode == "a" else proj.null_b
    n = per_view.shape[0]
    tokens = per_view if views == 1 else ag.concat_rows([per_view] * views)
    return ContextSequence(tokens, "c", [(i, (i * n, (i + 1) * n)) for i in range(views)])


def mix_null(ctx: Tensor, null: Tensor, drop: np.ndarray) -> Tensor:
    """Replace the contexts of batch rows where ``drop`` is true by ``null``.

    ``ctx`` is ``[B, L, d]``, ``null`` is ``[L, d]`` and ``drop`` is a boolean
    ``[B]`` mask.
    """
    if not np.any(drop):
        return ctx
    m = np.asarray(drop, dtype=ctx.dtype).reshape(-1, 1, 1)
    keep = ag.mul(ctx, Tensor(1.0 - m, dtype=ctx.dtype))
    return ag.add(keep, ag.mul(ag.reshape(null, (1,) + null.shape), Tensor(m, dtype=ctx.dtype)))
