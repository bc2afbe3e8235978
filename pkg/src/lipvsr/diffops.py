"""A small reverse-mode autodiff engine over dense NCHW arrays.

Only the operators the networks, trainer and receptive-field tool need are
provided. The tape is dynamic: every op executed while gradients are enabled
and with at least one input that ``requires_grad`` records a closure, and
:func:`backward` walks the resulting graph in reverse topological order.

Example::

    x = Tensor(np.random.rand(1, 2, 8, 8), requires_grad=True)
    k = Kernel.random(3, 2, 3, rng=np.random.default_rng(0), requires_grad=True)
    loss = mse_loss(relu(conv2d(x, k)), np.zeros((1, 3, 8, 8)))
    backward(loss)
    x.grad.shape  # (1, 2, 8, 8)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, ShapeError, UsageError

PADDING_MODES = ("zero", "circular")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array plus an optional gradient accumulator and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        if isinstance(c, Tensor):
            raise UsageError("tensor * tensor is not supported; use scale() with a python scalar")
        return scale(self, float(c))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves keep accumulating across calls until :meth:`Tensor.zero_grad`.
    """
    if root.data.size != 1:
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------------
# Kernel
# --------------------------------------------------------------------------


@dataclass
class Kernel:
    """Convolution weights ``(C_out, C_in, k, k)`` with optional bias."""

    weight: Tensor
    bias: Tensor | None = None
    padding: str = "zero"

    def __post_init__(self):
        if not isinstance(self.weight, Tensor):
            self.weight = Tensor(self.weight)
        if self.bias is not None and not isinstance(self.bias, Tensor):
            self.bias = Tensor(self.bias)
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ConfigError(f"kernel weights must be (C_out, C_in, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {w.shape[2]}")
        if self.padding not in PADDING_MODES:
            raise ConfigError(f"padding must be one of {PADDING_MODES}, got {self.padding!r}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} != ({w.shape[0]},)")

    @classmethod
    def from_arrays(cls, weight, bias=None, padding: str = "zero", requires_grad: bool = False) -> "Kernel":
        w = Tensor(np.array(weight), requires_grad=requires_grad)
        b = None if bias is None else Tensor(np.array(bias), requires_grad=requires_grad)
        return cls(w, b, padding)

    @classmethod
    def delta(cls, channels: int = 1, k: int = 3, gain: float = 1.0, padding: str = "zero", dtype=np.float64) -> "Kernel":
        w = np.zeros((channels, channels, k, k), dtype=dtype)
        for c in range(channels):
            w[c, c, k // 2, k // 2] = gain
        return cls(Tensor(w), None, padding)

    @classmethod
    def random(cls, c_out, c_in, k=3, rng=None, padding="zero", bias=False, requires_grad=False, dtype=np.float64):
        rng = np.random.default_rng() if rng is None else rng
        w = rng.standard_normal((c_out, c_in, k, k)).astype(dtype)
        b = rng.standard_normal(c_out).astype(dtype) if bias else None
        return cls.from_arrays(w, b, padding, requires_grad)

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def linear_part(self) -> "Kernel":
        """Same weights, no bias, detached from any tape."""
        return Kernel(Tensor(self.weight.data), None, self.padding)


# --------------------------------------------------------------------------
# array-level convolution primitives
# --------------------------------------------------------------------------


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    widths = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "zero":
        return np.pad(x, widths)
    return np.pad(x, widths, mode="wrap")


def _pad_adjoint(gp: np.ndarray, p: int, mode: str, H: int, W: int) -> np.ndarray:
    if p == 0:
        return gp
    if mode == "zero":
        return np.ascontiguousarray(gp[:, :, p : p + H, p : p + W])
    rows = (np.arange(H + 2 * p) - p) % H
    cols = (np.arange(W + 2 * p) - p) % W
    tmp = np.zeros(gp.shape[:2] + (H, W + 2 * p), dtype=gp.dtype)
    np.add.at(tmp, (slice(None), slice(None), rows), gp)
    out = np.zeros(gp.shape[:2] + (H, W), dtype=gp.dtype)
    np.add.at(out, (slice(None), slice(None), slice(None), cols), tmp)
    return out


def _check_conv(x_shape, kern: Kernel, channels: int, what: str):
    if len(x_shape) != 4:
        raise ShapeError(f"{what} expects a (B, C, H, W) tensor, got shape {x_shape}")
    if x_shape[1] != channels:
        raise ShapeError(f"{what}: input has {x_shape[1]} channels, kernel expects {channels}")


def conv2d_array(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, padding: str = "zero") -> np.ndarray:
    B, C, H, W = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    cols = _kernels.im2col(_pad(x, p, padding), k)
    out = np.matmul(w.reshape(co, -1), cols).reshape(B, co, H, W)
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def conv2d_transpose_array(y: np.ndarray, w: np.ndarray, padding: str = "zero") -> np.ndarray:
    B, co, H, W = y.shape
    ci, k = w.shape[1], w.shape[2]
    p = k // 2
    cols = np.matmul(w.reshape(co, -1).T, y.reshape(B, co, H * W))
    gp = _kernels.col2im(cols, ci, k, H + 2 * p, W + 2 * p)
    return _pad_adjoint(gp, p, padding, H, W)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, padding: str) -> np.ndarray:
    """d<conv(x, w), g>/dw for a bias-free conv."""
    B, C, H, W = x.shape
    co = g.shape[1]
    cols = _kernels.im2col(_pad(x, k // 2, padding), k)
    gw = np.matmul(g.reshape(B, co, H * W), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(co, C, k, k)


# --------------------------------------------------------------------------
# differentiable ops
# --------------------------------------------------------------------------


def conv2d(x: Tensor, kern: Kernel) -> Tensor:
    """Stride-1, same-size 2-D convolution (cross-correlation) plus bias."""
    x = _as_tensor(x)
    _check_conv(x.shape, kern, kern.c_in, "conv2d")
    w, b = kern.weight, kern.bias
    out = conv2d_array(x.data, w.data, None if b is None else b.data, kern.padding)
    k, mode = kern.k, kern.padding

    def grad_fn(g):
        gx = conv2d_transpose_array(g, w.data, mode) if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, k, mode) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return grads

    parents = [x, w] + ([b] if b is not None else [])
    return _record(out, parents, grad_fn)


def conv2d_transpose(y: Tensor, kern: Kernel) -> Tensor:
    """Exact adjoint of :func:`conv2d` with the same weights and padding; bias is ignored."""
    y = _as_tensor(y)
    _check_conv(y.shape, kern, kern.c_out, "conv2d_transpose")
    w = kern.weight
    out = conv2d_transpose_array(y.data, w.data, kern.padding)
    k, mode = kern.k, kern.padding

    def grad_fn(g):
        gy = conv2d_array(g, w.data, None, mode) if y.requires_grad else None
        # <convT(y, w), g> = <y, conv(g, w)>, so the weight gradient swaps roles
        gw = _conv_weight_grad(g, y.data, k, mode) if w.requires_grad else None
        return gy, gw

    return _record(out, [y, w], grad_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _record(out, [x], lambda g: (g * mask,))


def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    B, C, H, W = a.shape
    c = C // (s * s)
    return a.reshape(B, c, s, s, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * s, W * s)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    B, c, Hs, Ws = a.shape
    H, W = Hs // s, Ws // s
    return a.reshape(B, c, H, s, W, s).transpose(0, 1, 3, 5, 2, 4).reshape(B, c * s * s, H, W)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """(B, C*s^2, H, W) -> (B, C, H*s, W*s)."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[1] % (s * s):
        raise ShapeError(f"pixel_shuffle: channels {x.shape[1] if x.ndim == 4 else '?'} not divisible by {s}^2")
    return _record(_shuffle(x.data, s), [x], lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] % s or x.shape[3] % s:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape[2:]} not divisible by {s}")
    return _record(_unshuffle(x.data, s), [x], lambda g: (_shuffle(g, s),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != 4 or (x.shape[0], x.shape[2], x.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: {x.shape} incompatible with {ref}")
    sizes = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return [g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs))]

    return _record(np.concatenate([x.data for x in xs], axis=1), xs, grad_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    C = x.shape[1]

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    if not 0 <= start < stop <= C:
        raise ShapeError(f"slice_channels: [{start}:{stop}] outside 0..{C}")
    return _record(x.data[:, start:stop].copy(), [x], grad_fn)


def unsqueeze0(x: Tensor) -> Tensor:
    """Prepend a batch axis of size 1."""
    x = _as_tensor(x)
    return _record(x.data[None], [x], lambda g: (g[0],))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, [a, b], lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _record(x.data * x.dtype.type(c), [x], lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _record(np.asarray(x.data.sum()), [x], lambda g: (np.broadcast_to(g, x.shape).copy(),))


def abs_(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return _record(np.abs(x.data), [x], lambda g: (g * sign,))


def pick(x: Tensor, index: tuple[int, ...]) -> Tensor:
    """Scalar element ``x[index]`` as a 0-d tensor."""
    x = _as_tensor(x)

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[index] = g
        return (full,)

    return _record(np.asarray(x.data[index]), [x], grad_fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant unless it is a Tensor on the tape."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff))

    def grad_fn(g):
        d = (2.0 / n) * g * diff
        return d, -d

    return _record(out, [pred, target], grad_fn)


def add_scalars(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# 1x1 kernel mapping RGB to full-range BT.601 luma.
_Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


def rgb_to_y(x: Tensor) -> Tensor:
    """(B, 3, H, W) RGB -> (B, 1, H, W) luma, differentiable."""
    x = _as_tensor(x)
    w = _Y_WEIGHTS.astype(x.dtype).reshape(1, 3, 1, 1)
    return conv2d(x, Kernel(Tensor(w), None, "zero"))
