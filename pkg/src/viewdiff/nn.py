"""Parameter containers and the layers the UNet and encoder are built from."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeMismatch


class Module:
    """Base class: parameters are Tensor attributes, children are Module attributes.

    Attribute insertion order defines parameter naming and ordering, which is
    what checkpoints and optimizers rely on.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.named_parameters()}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=dtype)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return _param(rng.uniform(-bound, bound, size=shape), dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float32, zero=False):
        if zero:
            self.weight = _param(np.zeros((d_in, d_out)), dtype)
        else:
            self.weight = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.bias = _param(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return ag.add(y, self.bias) if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, dtype=np.float32, zero=False
    ):
        fan_in = c_in * k * k
        if zero:
            self.weight = _param(np.zeros((c_out, c_in, k, k)), dtype)
            self.bias = _param(np.zeros(c_out), dtype)
        else:
            self.weight = uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype)
            self.bias = uniform_init(rng, (c_out,), fan_in, dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, dtype=np.float32):
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return ag.group_norm(x, self.groups, self.gamma, self.beta)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gamma = _param(np.ones(d), dtype)
        self.beta = _param(np.zeros(d), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Single-head scaled dot-product attention.

    Queries come from ``hidden`` (``[..., S, d_model]``); keys and values come
    from ``context`` (``[..., L, d_context]``), which defaults to ``hidden``
    for self-attention.
    """

    def __init__(self, rng, d_model: int, d_context: Optional[int] = None, d_head: Optional[int] = None,
                 dtype=np.float32):
        d_context = d_model if d_context is None else d_context
        d_head = d_model if d_head is None else d_head
        self.to_q = Linear(rng, d_model, d_head, bias=False, dtype=dtype)
        self.to_k = Linear(rng, d_context, d_head, bias=False, dtype=dtype)
        self.to_v = Linear(rng, d_context, d_head, bias=False, dtype=dtype)
        self.to_out = Linear(rng, d_head, d_model, dtype=dtype)
        self.d_head = d_head

    def weights(self, hidden: Tensor, context: Optional[Tensor] = None) -> Tensor:
        """Attention matrix ``softmax(Q K^T / sqrt(d_k))``, shape ``[..., S, L]``."""
        context = hidden if context is None else context
        q = self.to_q(hidden)
        k = self.to_k(context)
        scores = ag.scale(ag.matmul(q, ag.swap_last(k)), 1.0 / math.sqrt(self.d_head))
        return ag.softmax(scores)

    def forward(self, hidden: Tensor, context: Optional[Tensor] = None, return_weights: bool = False):
        context = hidden if context is None else context
        if hidden.ndim != context.ndim:
            raise ShapeMismatch(f"hidden {hidden.shape} vs context {context.shape}")
        attn = self.weights(hidden, context)
        out = self.to_out(ag.matmul(attn, self.to_v(context)))
        return (out, attn) if return_weights else out
