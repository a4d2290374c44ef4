"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the sequence model needs are provided. Shapes are
explicit: binary elementwise ops accept two tensors of identical shape, or
a tensor and a scalar, and nothing else. ``linear`` is the one place a bias
row is added to every sample, and it checks the shapes it expects.

Gradients are *not* accumulated across backward passes. Calling
:func:`backward` while any reachable tensor still holds a ``grad`` raises;
call :func:`zero_grad` (or set ``grad = None``) first.

Numerical stability:

* ``softmax``/``cross_entropy`` subtract the row maximum before exponentiating.
* ``sigmoid`` evaluates ``exp(-|x|)`` so it never overflows.
* ``tanh`` and ``relu`` are bounded by construction.
"""
from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterable, Sequence
from numbers import Number

import numpy as np

from . import kernels

_DTYPES = {"float64": np.float64, "float32": np.float32}
_precision = "float64"
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class NumericalError(ArithmeticError):
    """A forward activation became NaN or infinite."""


def set_precision(name: str) -> None:
    """Switch the global float width: ``"float64"`` (verification) or ``"float32"`` (training)."""
    global _precision
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


def get_precision() -> str:
    return _precision


def get_dtype() -> type:
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(name: str):
    old = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them for backward."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=get_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A leaf sharing this tensor's data, with no gradient tracking."""
        return _wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.name = None
    return t


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = _wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- tape


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of grad-requiring tensors feeding ``loss``.

    Inputs come before the tensors computed from them, so walking the list
    backwards replays the recorded ops in reverse, each exactly once.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor with requires_grad=True")
    tape = build_tape(loss)
    for t in tape:
        if t.grad is not None:
            label = t.name or repr(t)
            raise RuntimeError(
                f"gradient already populated on {label}; call zero_grad() before another backward pass"
            )
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape):
        g = pending.pop(id(t), None)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        if t._backward is None:
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + gp if key in pending else gp
        # free the recorded graph; a second backward through it is impossible
        t._backward = None
        t._parents = ()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


def _scalar_value(x) -> float | None:
    if isinstance(x, Number):
        return float(x)
    return None


def add(a: Tensor, b) -> Tensor:
    s = _scalar_value(b)
    if s is not None:
        return _result(a.data + a.data.dtype.type(s), (a,), lambda g: (g,))
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    if a.ndim == 0 and b.ndim > 0:
        return add(b, a)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    s = _scalar_value(b)
    if s is not None:
        return add(a, -s)
    return add(a, neg(as_tensor(b)))


def mul(a: Tensor, b) -> Tensor:
    s = _scalar_value(b)
    if s is not None:
        k = a.data.dtype.type(s)
        return _result(a.data * k, (a,), lambda g: (g * k,))
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        ad, bd = a.data, b.data
        return _result(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum()))
    if a.ndim == 0 and b.ndim > 0:
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(x.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


# --------------------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with x (N, in), weight (in, out), bias (out,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    return _result(xd @ wd + bias.data, (x, weight, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# --------------------------------------------------------------------------- convolution & pooling


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x (N, Cin, H, W), weight (Cout, Cin, kh, kw), bias (Cout,)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    wm = weight.data.reshape(cout, -1)

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
        padded_shape = None
    else:
        xp = x.data
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        xp = np.ascontiguousarray(xp)
        padded_shape = xp.shape
        cols = kernels.im2col(xp, kh, kw, stride)
    out = cols @ wm.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = gm @ wm
            if pointwise:
                gx = np.ascontiguousarray(dcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2))
            else:
                gxp = kernels.col2im(np.ascontiguousarray(dcols), padded_shape, kh, kw, stride)
                gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return _result(out, (x, weight, bias), bw)


def pool_output_size(size: int, kernel: int, stride: int, padding: int, ceil_mode: bool) -> int:
    span = size + 2 * padding - kernel
    if ceil_mode:
        out = -(-span // stride) + 1
        # the last window must start inside the input or the leading pad
        if (out - 1) * stride >= size + padding:
            out -= 1
    else:
        out = span // stride + 1
    return out


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None, padding: int = 0, ceil_mode: bool = True) -> Tensor:
    """Max-pool over spatial axes; ceil mode keeps a partial window at the far edge."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected (N, C, H, W), got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if padding * 2 > kernel:
        raise ValueError("max_pool2d: padding may be at most half the kernel")
    ho = pool_output_size(h, kernel, stride, padding, ceil_mode)
    wo = pool_output_size(w, kernel, stride, padding, ceil_mode)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {h}x{w} too small for kernel {kernel}")
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(x.data), kernel, stride, padding, ho, wo)
    return _result(out, (x,), lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w),))


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool_spatial: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(g.dtype),)

    return _result(out, (x,), bw)


# --------------------------------------------------------------------------- shape ops


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _result(out, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: no tensors given")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack: {t.shape} differs from {ref}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    return reshape(x, (x.shape[0], -1))


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one index along ``axis``, dropping that axis."""
    ax = axis % x.ndim
    if not -x.shape[ax] <= index < x.shape[ax]:
        raise ShapeError(f"select: index {index} out of range for axis of size {x.shape[ax]}")
    out = np.take(x.data, index, axis=ax)

    def bw(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (x,), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice_axis: [{start}:{stop}] invalid for axis of size {x.shape[ax]}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    out = x.data[sl]

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _result(out, (x,), bw)


# --------------------------------------------------------------------------- reductions & losses


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: target index out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, targets]).mean()

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1
        return (p * (g / n),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _result(np.asarray((diff * diff).mean()), (pred,), lambda g: (diff * (2 * g / n),))


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericalError(f"non-finite activation in {where}")
    return t


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
