"""Small reverse-mode automatic differentiation library on top of numpy.

Every operation returns a fresh :class:`Tensor` whose buffer is read-only and
never shared with another tensor. When gradient recording is enabled and any
input requires a gradient, the output remembers its inputs together with a
backward rule; :func:`backward` linearises that graph into a :class:`Tape`
(define-by-run, rebuilt on every forward pass) and walks it in reverse.

Two element types are supported: ``float32`` for compute and ``float64`` for
gradient checking. Operations keep the dtype of their inputs.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DivisibilityError, EmptyAxis, NonScalarLoss, ShapeMismatch

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not isinstance(arr, np.ndarray):
        arr = np.array(arr)
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.dtype(data.dtype) in DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        dtype = np.dtype(dtype)
        if dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {dtype}")
        self.data = _freeze(np.array(data, dtype=dtype, copy=True))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # arr must be a freshly allocated buffer owned by nobody else
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        t.requires_grad = False
        t.grad = None
        t._inputs = ()
        t._backward = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def assign(self, arr: np.ndarray) -> None:
        """Replace the buffer of a leaf tensor (optimizer updates, checkpoint loads)."""
        if self._backward is not None:
            raise RuntimeError("assign() is only valid on leaf tensors")
        arr = np.asarray(arr)
        if arr.shape != self.shape:
            raise ShapeMismatch(f"cannot assign {arr.shape} into {self.shape}")
        self.data = _freeze(np.array(arr, dtype=self.dtype, copy=True))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(arr)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward = backward_fn
    return out


def _same_dtype(*ts: Tensor) -> None:
    # silent float32 -> float64 promotion would hide a 2x slowdown
    if any(t.dtype != ts[0].dtype for t in ts[1:]):
        raise TypeError(f"mixed dtypes: {[str(t.dtype) for t in ts]}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward


@dataclass(frozen=True)
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    rule: BackwardFn

    @property
    def output_id(self) -> int:
        return id(self.output)

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(id(t) for t in self.inputs)


@dataclass
class Tape:
    """Operations reachable from one output, in topological order."""

    entries: list[TapeEntry]
    leaves: list[Tensor]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        entries: list[TapeEntry] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                entries.append(TapeEntry(node, node._inputs, node._backward))
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._backward is None:
                if node.requires_grad:
                    leaves.append(node)
                continue
            stack.append((node, True))
            for inp in reversed(node._inputs):
                if id(inp) not in seen:
                    stack.append((inp, False))
        return cls(entries, leaves)


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> Tape:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Gradients overwrite (not accumulate), so repeated calls on the same graph
    give identical results. Leaves listed in ``params`` that the loss does not
    depend on receive a zero gradient.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        leaf.grad = None if g is None else np.array(g, dtype=leaf.dtype).reshape(leaf.shape)
    if params is not None:
        reached = {id(leaf) for leaf in tape.leaves}
        for p in params:
            if id(p) not in reached:
                p.grad = np.zeros_like(p.data)
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}") from exc
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot subtract {b.shape} from {a.shape}") from exc
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot multiply {a.shape} and {b.shape}") from exc
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = np.asarray(s, dtype=a.dtype)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def silu(x: Tensor) -> Tensor:
    # tanh form of the logistic avoids exp overflow warnings in float32
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(x.data * sig, (x,), lambda g: (g * (sig * (1.0 + x.data * (1.0 - sig))),))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inv),),
    )


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat of an empty list")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeMismatch(f"cannot concatenate {[q.shape for q in parts]} on axis {axis}")
    _same_dtype(*parts)
    out = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=ax))

    return _result(out, tuple(parts), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack ``[L_i, d]`` token blocks along the sequence axis (second to last)."""
    if not parts:
        raise ShapeMismatch("concat_rows of an empty list")
    d = parts[0].shape[-1]
    if any(p.ndim < 2 or p.shape[-1] != d for p in parts):
        raise ShapeMismatch(f"token widths differ: {[p.shape for p in parts]}")
    return concat(parts, axis=-2)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a ``B x C x H x W`` tensor."""
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims of ``a`` broadcast against a 2-D ``b``."""
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def rule(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result(out, (a, b), rule)
    if a.shape[:-2] != b.shape[:-2] and a.ndim == b.ndim:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError as exc:
            raise ShapeMismatch(f"matmul batch dims {a.shape} x {b.shape}") from exc
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the slice max."""
    if axis not in (-1, x.ndim - 1):
        raise ValueError("softmax is only defined over the last axis")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise EmptyAxis("softmax over an empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), rule)


# ---------------------------------------------------------------------------
# normalisation


def _norm_backward(g_hat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, n: int) -> np.ndarray:
    return (inv / n) * (
        n * g_hat - g_hat.sum(-1, keepdims=True) - xhat * (g_hat * xhat).sum(-1, keepdims=True)
    )


def group_norm(
    x: Tensor,
    groups: int,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = 1e-5,
) -> Tensor:
    """Group normalisation of ``B x C x ...`` with optional per-channel affine."""
    _same_dtype(x, *(t for t in (gamma, beta) if t is not None))
    if x.ndim < 2:
        raise ShapeMismatch("group_norm expects B x C x ...")
    bsz, ch = x.shape[:2]
    if groups < 1 or ch % groups:
        raise DivisibilityError(f"{ch} channels not divisible into {groups} groups")
    bshape = (1, ch) + (1,) * (x.ndim - 2)
    xr = x.data.reshape(bsz, groups, -1)
    n = xr.shape[-1]
    mu = xr.mean(-1, keepdims=True)
    xc = xr - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat.reshape(x.shape)
    if gamma is not None:
        y = y * gamma.data.reshape(bshape)
    if beta is not None:
        y = y + beta.data.reshape(bshape)
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)
    red = (0,) + tuple(range(2, x.ndim))

    def rule(g):
        g_hat = g * gamma.data.reshape(bshape) if gamma is not None else g
        dx = _norm_backward(g_hat.reshape(bsz, groups, n), xhat, inv, n).reshape(x.shape)
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat.reshape(x.shape)).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return grads

    return _result(y, inputs, rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _same_dtype(x, gamma, beta)
    mu = x.data.mean(-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]
    red = tuple(range(x.ndim - 1))

    def rule(g):
        dx = _norm_backward(g * gamma.data, xhat, inv, n)
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Column matrix ``[B*Ho*Wo, k*k*C]`` of a ``B x C x H x W`` array.

    Channels-last internally: one row per output pixel keeps the following GEMM
    tall and skinny, the orientation BLAS handles well.
    """
    bsz, ch, h, w = x.shape
    xh = np.zeros((bsz, h + 2 * pad, w + 2 * pad, ch), dtype=x.dtype)
    xh[:, pad : pad + h, pad : pad + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((bsz, ho, wo, k, k, ch), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
    return cols.reshape(-1, k * k * ch)


def conv2d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: Optional[int] = None
) -> Tensor:
    """2-D cross-correlation (no kernel flip) of ``B x C x H x W`` with ``O x C x k x k``.

    ``pad`` defaults to ``k // 2``, which keeps H and W unchanged at stride 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    _same_dtype(x, w, *([b] if b is not None else []))
    bsz, ch, h, wd = x.shape
    out_ch, in_ch, k, k2 = w.shape
    if in_ch != ch:
        raise ShapeMismatch(f"kernel expects {in_ch} channels, input has {ch}")
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"kernel must be square with odd size, got {k}x{k2}")
    if b is not None and b.shape != (out_ch,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({out_ch},)")
    if pad is None:
        pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    cols = _im2col(x.data, k, stride, pad, ho, wo)
    wr = w.data.transpose(2, 3, 1, 0).reshape(-1, out_ch)
    y = cols @ wr
    if b is not None:
        y += b.data
    out = np.ascontiguousarray(y.reshape(bsz, ho, wo, out_ch).transpose(0, 3, 1, 2))

    def rule(g):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_ch)
        dw = (cols.T @ gr).reshape(k, k, ch, out_ch).transpose(3, 2, 0, 1)
        if stride == 1 and pad <= k - 1:
            # input gradient as a correlation of g with the flipped, transposed kernel
            gcols = _im2col(g, k, 1, k - 1 - pad, h, wd)
            wf = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(-1, ch)
            dx = (gcols @ wf).reshape(bsz, h, wd, ch).transpose(0, 3, 1, 2)
        else:
            dcols = (gr @ wr.T).reshape(bsz, ho, wo, k, k, ch)
            dxh = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, ch), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, i, j, :]
            dx = dxh[:, pad : pad + h, pad : pad + wd, :].transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(dx), np.ascontiguousarray(dw)]
        if b is not None:
            grads.append(gr.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, rule)


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse {pred.shape} vs {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))
