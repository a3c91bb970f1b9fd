"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (network blocks, losses, the optimizer) is built on
this module.  Design points:

- 64-bit floats throughout, row-major storage.
- Graph recording is explicit: ops build backward closures only inside a
  ``with recording():`` block, so inference and metric code stay graph-free.
- Broadcasting is restricted to extent-1 axes of equal-rank operands; there
  is no implicit rank promotion.
- Gradients accumulate additively when a tensor feeds multiple consumers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_state = threading.local()

# Sigmoid outputs are clipped into the open interval (0,1) so that code
# relying on strict bounds (log, BCE) never sees an exact 0 or 1.
_SIG_LO = 1e-300
_SIG_HI = float(np.nextafter(1.0, 0.0))

BCE_EPS = 1e-7


def is_recording() -> bool:
    """True while a graph is being recorded on this thread."""
    return getattr(_state, "recording", False)


@contextmanager
def recording():
    """Enable graph recording for the enclosed forward computation."""
    prev = is_recording()
    _state.recording = True
    try:
        yield
    finally:
        _state.recording = prev


class Tensor:
    """N-dimensional float64 array, optionally part of a differentiation graph.

    ``grad`` is lazily allocated by :meth:`backward`; leaves not reached by
    the backward sweep keep ``grad is None`` (see :func:`ensure_grads`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not part of the op set")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ------------------------------------------------------

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def log(self) -> "Tensor":
        return log(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def permute(self, axes: Sequence[int]) -> "Tensor":
        return permute(self, axes)

    def transpose2d(self) -> "Tensor":
        return permute(self, (1, 0))

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def parameter(data) -> Tensor:
    """A learnable leaf tensor."""
    return Tensor(data, requires_grad=True)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def ensure_grads(params: Iterable[Tensor]) -> None:
    """Give zero gradients to leaves the backward sweep did not reach."""
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# -- graph plumbing ---------------------------------------------------------


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[Tensor], None]) -> Tensor:
    """Wrap an op result; attach the backward closure only when recording."""
    track = is_recording() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = lambda: backward(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _broadcast_check(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if len(a) != len(b):
        raise DimensionError(f"rank mismatch: {a} vs {b} (no rank promotion)")
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"shapes {a} and {b} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient contributions over axes that were stretched from 1."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True)


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)

    def bwd(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)

    def bwd(out: Tensor) -> None:
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(out: Tensor) -> None:
        _accum(a, out.grad * s)

    return _make(a.data * s, (a,), bwd)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(out: Tensor) -> None:
        _accum(a, out.grad)

    return _make(a.data + s, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(out: Tensor) -> None:
        _accum(a, out.grad * (a.data > 0.0))

    return _make(np.maximum(a.data, 0.0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    np.clip(y, _SIG_LO, _SIG_HI, out=y)

    def bwd(out: Tensor) -> None:
        _accum(a, out.grad * out.data * (1.0 - out.data))

    return _make(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(out: Tensor) -> None:
        _accum(a, out.grad / a.data)

    return _make(np.log(a.data), (a,), bwd)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def bwd(out: Tensor) -> None:
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)

    return _make(a.data @ b.data, (a, b), bwd)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of ``x`` (C_in,H,W) with ``k`` (C_out,C_in,kh,kw).

    Output extents must divide exactly: H' = (H + 2*padding - kh)/stride + 1.
    """
    from .errors import ConfigError

    if x.data.ndim != 3 or k.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects input (C,H,W) and kernel (O,C,kh,kw), "
            f"got {x.shape} and {k.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = k.shape
    if kc != c_in:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {k.shape} larger than padded input {(c_in, hp, wp)}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigError(
            f"conv2d output extent not integral: input {x.shape}, kernel "
            f"{k.shape}, stride {stride}, padding {padding}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]          # (C, H', W', kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2))
    cols = cols.reshape(c_in * kh * kw, h_out * w_out)
    w_mat = k.data.reshape(c_out, c_in * kh * kw)
    out_data = (w_mat @ cols).reshape(c_out, h_out, w_out)

    def bwd(out: Tensor) -> None:
        dout = out.grad.reshape(c_out, h_out * w_out)
        if k.requires_grad:
            _accum(k, (dout @ cols.T).reshape(k.shape))
        if x.requires_grad:
            dcols = (w_mat.T @ dout).reshape(c_in, kh, kw, h_out, w_out)
            dxp = np.zeros((c_in, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * h_out:stride,
                        j:j + stride * w_out:stride] += dcols[:, i, j]
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + w]
            _accum(x, dxp)

    return _make(out_data, (x, k), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(out: Tensor) -> None:
        g = out.grad
        inner = (g * out.data).sum(axis=axis, keepdims=True)
        _accum(a, out.data * (g - inner))

    return _make(y, (a,), bwd)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")

    def bwd(out: Tensor) -> None:
        _accum(a, out.grad.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(i) for i in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(out: Tensor) -> None:
        _accum(a, out.grad.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise UsageError("concat of an empty sequence")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
                i != axis and t.shape[i] != first[i] for i in range(len(first))):
            raise DimensionError(
                f"concat shapes disagree off axis {axis}: "
                f"{[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(out: Tensor) -> None:
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, out.grad[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis``."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(out: Tensor) -> None:
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            _accum(a, g)

    return _make(a.data[idx].copy(), (a,), bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def upsample_nearest2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of a (C,H,W) tensor."""
    if a.data.ndim != 3:
        raise DimensionError(f"upsample expects (C,H,W), got {a.shape}")
    c, h, w = a.shape
    y = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def bwd(out: Tensor) -> None:
        _accum(a, out.grad.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _make(y, (a,), bwd)


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    def bwd(out: Tensor) -> None:
        _accum(a, np.broadcast_to(out.grad, a.shape))

    return _make(a.data.sum(), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def bwd(out: Tensor) -> None:
        _accum(a, np.broadcast_to(out.grad / n, a.shape))

    return _make(a.data.mean(), (a,), bwd)


def _check_same_shape(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise DimensionError(
            f"{op} shapes differ: {pred.shape} vs {target.shape}")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = pred.size

    def bwd(out: Tensor) -> None:
        g = out.grad * (2.0 / n) * diff
        _accum(pred, g)
        _accum(target, -g)

    return _make(np.array((diff * diff).mean()), (pred, target), bwd)


def l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    _check_same_shape(pred, target, "l1")
    diff = pred.data - target.data
    n = pred.size

    def bwd(out: Tensor) -> None:
        g = out.grad * np.sign(diff) / n
        _accum(pred, g)
        _accum(target, -g)

    return _make(np.array(np.abs(diff).mean()), (pred, target), bwd)


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy; probabilities are clamped to
    [BCE_EPS, 1 - BCE_EPS] before the logs."""
    _check_same_shape(pred, target, "bce")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    t = target.data
    n = pred.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    active = (pred.data >= BCE_EPS) & (pred.data <= 1.0 - BCE_EPS)

    def bwd(out: Tensor) -> None:
        if pred.requires_grad:
            g = out.grad * active * (p - t) / (p * (1.0 - p)) / n
            _accum(pred, g)
        if target.requires_grad:
            _accum(target, out.grad * (np.log1p(-p) - np.log(p)) / n)

    return _make(np.array(loss), (pred, target), bwd)
