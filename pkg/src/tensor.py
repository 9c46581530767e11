"""Reverse-mode differentiable array engine backed by numpy.

Every operation returns a new Tensor; when gradient recording is enabled and any
input requires a gradient, the result remembers its parents and a rule that maps
the incoming gradient to gradients for those parents. ``backward`` walks the
recorded graph in reverse topological order and accumulates ``.grad`` on every
tensor that requires one (intermediates included, which Grad-CAM relies on).
"""

import contextlib
import math
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class TensorError(Exception):
    """Base class for tensor engine failures."""
    pass


class ShapeError(TensorError):
    """Raised when operand shapes are incompatible with an operation."""
    pass


class NumericalError(TensorError):
    """Raised when a forward or backward pass produces NaN or Inf."""
    pass


class GradientUsageError(TensorError):
    """Raised when the differentiation API is used incorrectly."""
    pass


# recording is switched per thread
_grad_state = threading.local()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block, for the calling thread only."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """
    N-dimensional float64 array with an optional gradient.

    Attributes:
        data: Values in row-major order.
        requires_grad: Whether backward should produce a gradient for this tensor.
        grad: Accumulated gradient with the same shape as data, or None.
        name: Optional dotted path used for parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return _wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_reduce(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean_reduce(self, axis, keepdims)


TensorLike = Union[Tensor, np.ndarray, float, int]


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    return out


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _wrap(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: BackwardFn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = _wrap(np.asarray(data, dtype=np.float64))
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# -- elementwise arithmetic -------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), rule, "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), rule, "div")


def power(x: TensorLike, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = np.power(x.data, exponent)

    def rule(g):
        return (g * exponent * np.power(x.data, exponent - 1),)

    return _result(out, (x,), rule, "power")


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def rule(g):
        return (g * out,)

    return _result(out, (x,), rule, "exp")


def log(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def rule(g):
        return (g / x.data,)

    return _result(out, (x,), rule, "log")


# -- shape manipulation -----------------------------------------------------

def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}")

    def rule(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), rule, "reshape")


def transpose(x: TensorLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inverse = np.argsort([a % x.ndim for a in axes])

    def rule(g):
        return (g.transpose(inverse),)

    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), rule, "transpose")


def getitem(x: TensorLike, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index])

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (x,), rule, "getitem")


def broadcast_to(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}")

    def rule(g):
        return (_unbroadcast(g, x.shape),)

    return _result(out, (x,), rule, "broadcast_to")


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: no tensors given")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, parts, rule, "concat")


def concat_channels(tensors: Sequence[TensorLike]) -> Tensor:
    """Concatenate NCHW maps along the channel axis."""
    parts = [as_tensor(t) for t in tensors]
    spatial = {(p.shape[0],) + p.shape[2:] for p in parts}
    if len(spatial) != 1:
        raise ShapeError(f"concat_channels: batch/spatial dims differ: {[p.shape for p in parts]}")
    return concat(parts, axis=1)


# -- reductions -------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_reduce(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _result(np.asarray(out), (x,), rule, "sum")


def mean_reduce(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _result(np.asarray(out), (x,), rule, "mean")


# -- linear algebra ---------------------------------------------------------

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Batched matrix product over the last two axes.

    Args:
        a: Tensor of shape [..., m, k].
        b: Tensor of shape [..., k, n]; batch dims broadcast against a.

    Returns:
        Tensor of shape [..., m, n].

    Raises:
        ShapeError: If either operand has rank < 2, inner dims differ or batch dims
            do not broadcast.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims do not broadcast: {a.shape} x {b.shape}")

    def rule(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), rule, "matmul")


# -- convolutions -----------------------------------------------------------

def conv2d(x: TensorLike, w: TensorLike, bias: Optional[TensorLike] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation (no kernel flip).

    Args:
        x: Input of shape [B, Cin, H, W].
        w: Kernel of shape [Cout, Cin, kh, kw].
        bias: Optional [Cout] bias.
        stride: Step between windows.
        padding: Zero padding added to every spatial side.

    Returns:
        Tensor of shape [B, Cout, H', W'] with H' = (H + 2p - kh) // s + 1.

    Raises:
        ShapeError: On rank/channel mismatch or a non-positive output size.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    batch, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = w.shape
    if channels != kernel_channels:
        raise ShapeError(f"conv2d: input has {channels} channels, kernel expects {kernel_channels}")
    s, p = int(stride), int(padding)
    out_h = (height + 2 * p - kh) // s + 1
    out_w = (width + 2 * p - kw) // s + 1
    if out_h <= 0 or out_w <= 0 or height + 2 * p < kh or width + 2 * p < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {height}x{width} (p={p})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]
    out = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents: List[Tensor] = [x, w]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (out_channels,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({out_channels},)")
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def rule(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(w.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
                    gxp[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += contrib
            gx = gxp[:, :, p:p + height, p:p + width] if p else gxp
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(np.ascontiguousarray(out), parents, rule, "conv2d")


def conv_transpose2d(x: TensorLike, w: TensorLike, bias: Optional[TensorLike] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """
    Transposed 2-D convolution (the adjoint of conv2d).

    Args:
        x: Input of shape [B, Cin, H, W].
        w: Kernel of shape [Cin, Cout, kh, kw].
        bias: Optional [Cout] bias.
        stride: Spacing of the scattered kernel copies.
        padding: Rows/cols cropped from every side of the full output.

    Returns:
        Tensor of shape [B, Cout, (H-1)*s - 2p + kh, (W-1)*s - 2p + kw].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    batch, channels, height, width = x.shape
    kernel_channels, out_channels, kh, kw = w.shape
    if channels != kernel_channels:
        raise ShapeError(f"conv_transpose2d: input has {channels} channels, kernel expects {kernel_channels}")
    s, p = int(stride), int(padding)
    full_h, full_w = (height - 1) * s + kh, (width - 1) * s + kw
    out_h, out_w = full_h - 2 * p, full_w - 2 * p
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output size {out_h}x{out_w}")

    full = np.zeros((batch, out_channels, full_h, full_w))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            full[:, :, i:i + s * (height - 1) + 1:s, j:j + s * (width - 1) + 1:s] += contrib
    out = full[:, :, p:p + out_h, p:p + out_w]
    parents: List[Tensor] = [x, w]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (out_channels,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({out_channels},)")
        out = out + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def rule(g):
        g_full = np.zeros((batch, out_channels, full_h, full_w))
        g_full[:, :, p:p + out_h, p:p + out_w] = g
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                window = g_full[:, :, i:i + s * (height - 1) + 1:s, j:j + s * (width - 1) + 1:s]
                if gx is not None:
                    gx += np.tensordot(window, w.data[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                if gw is not None:
                    gw[:, :, i, j] = np.tensordot(x.data, window, axes=([0, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _result(np.ascontiguousarray(out), parents, rule, "conv_transpose2d")


# -- activations and normalization ------------------------------------------

def relu(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), rule, "relu")


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = _GELU_K * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def rule(g):
        d_inner = _GELU_K * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), rule, "gelu")


def sigmoid(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), rule, "sigmoid")


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), rule, "softmax")


def layer_norm(x: TensorLike, gamma: TensorLike, beta: TensorLike, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), rule, "layer_norm")


# -- resampling -------------------------------------------------------------

def interpolation_matrix(in_size: int, out_size: int) -> np.ndarray:
    """
    Linear-interpolation weights mapping in_size samples to out_size samples.

    Uses half-pixel centers (align_corners=False); rows sum to one and equal sizes
    give the identity.
    """
    if in_size <= 0 or out_size <= 0:
        raise ShapeError(f"interpolation sizes must be positive, got {in_size} -> {out_size}")
    matrix = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for dst in range(out_size):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        matrix[dst, i0] += 1.0 - lam
        matrix[dst, i1] += lam
    return matrix


def bilinear_upsample(x: TensorLike, size: Tuple[int, int]) -> Tensor:
    """Bilinearly resample an NCHW map to the given (height, width)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected 4-D input, got {x.shape}")
    out_h, out_w = int(size[0]), int(size[1])
    rows = interpolation_matrix(x.shape[2], out_h)
    cols = interpolation_matrix(x.shape[3], out_w)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def rule(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _result(out, (x,), rule, "bilinear_upsample")


# -- lookup and losses ------------------------------------------------------

def embedding(table: TensorLike, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer ids (any leading shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of {table.shape[0]} rows")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), rule, "embedding")


def binary_cross_entropy_with_logits(logits: TensorLike, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed stably from logits."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ShapeError(f"bce: target {target.shape} != logits {logits.shape}")
    x = logits.data
    count = x.size
    value = np.mean(np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x))))

    def rule(g):
        return (g * (expit(x) - target) / count,)

    return _result(np.asarray(value), (logits,), rule, "bce_with_logits")


# -- differentiation --------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != tensor.shape:
        grad = _unbroadcast(grad, tensor.shape).reshape(tensor.shape)
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient for {tensor.name or 'tensor'} {tensor.shape}")
    if tensor.grad is None:
        tensor.grad = np.array(grad)
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor requiring grad.

    Raises:
        GradientUsageError: If loss is not a scalar or does not depend on any
            tensor that requires a gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise GradientUsageError(f"backward needs a scalar loss, got {shape}")
    if not loss.requires_grad:
        raise GradientUsageError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._backward(node.grad)):
            if grad is None or not parent.requires_grad:
                continue
            _accumulate(parent, grad)


def gradcheck(f: Callable[[Tensor], Tensor], x: TensorLike, h: float = 1e-5) -> float:
    """
    Compare backward against central differences.

    Args:
        f: Scalar-valued function of one tensor.
        x: Point of evaluation; its data is perturbed in place and restored.
        h: Finite-difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.data = np.ascontiguousarray(x.data)
    was_required = x.requires_grad
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(f(x).data.sum())
            flat[i] = original - h
            minus = float(f(x).data.sum())
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * h)

    x.requires_grad = was_required
    x.grad = None
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
