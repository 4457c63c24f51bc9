"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` working on raw numpy arrays and a ``backward`` mapping the
output gradient to one gradient per input.  Calling ``Function.apply``
records a tape node on the result whenever an input requires a gradient.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = {"grad": True, "anomaly": False}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    prev = _state["anomaly"]
    _state["anomaly"] = True
    try:
        yield
    finally:
        _state["anomaly"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Context:
    """Per-call scratch space shared between an op's forward and backward."""

    def save(self, *values):
        self.saved = values


@dataclass
class SparseGrad:
    """Gradient that is zero except on ``index`` (basic indexing only)."""

    shape: tuple
    index: tuple
    value: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=DTYPE)
        out[self.index] += self.value
        return out


class Function:
    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        tensors = [x if x is None or isinstance(x, Tensor) else Tensor(x) for x in inputs]
        ctx = Context()
        out = cls.forward(ctx, *[None if t is None else t.data for t in tensors], **kwargs)
        if _state["anomaly"] and not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{cls.__name__} produced non-finite values")
        needs = _state["grad"] and any(t is not None and t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=needs)
        if needs:
            ctx.needs_input_grad = tuple(t is not None and t.requires_grad for t in tensors)
            result._node = (cls, ctx, tensors)
        return result

    @staticmethod
    def forward(ctx, *arrays, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- differentiation -----------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaf gradients add up over repeated calls until cleared with
        :meth:`zero_grad`; the graph itself is left intact.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topological(self)
        grads = {id(self): np.ones(self.shape, dtype=DTYPE)}
        owned = {id(self)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(g, SparseGrad):
                g = g.dense()
            if node._node is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    node.grad += g
                continue
            fn, ctx, parents = node._node
            in_grads = fn.backward(ctx, g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for parent, pg in zip(parents, in_grads):
                if parent is None or pg is None or not parent.requires_grad:
                    continue
                _accumulate(grads, owned, parent, pg)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return Mul.apply(self, Reciprocal.apply(other))
        return Mul.apply(self, 1.0 / other)

    def __neg__(self):
        return Mul.apply(self, -1.0)

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def relu(self):
        return Relu.apply(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._node is not None:
            for parent in node._node[2]:
                if parent is not None and parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def _accumulate(grads: dict, owned: set, parent: Tensor, g):
    key = id(parent)
    cur = grads.get(key)
    if cur is None:
        grads[key] = g
        return
    if isinstance(cur, SparseGrad):
        cur = cur.dense()
        owned.add(key)
    elif key not in owned:
        cur = np.array(cur, dtype=DTYPE, copy=True)
        owned.add(key)
    if isinstance(g, SparseGrad):
        cur[g.index] += g.value
    else:
        cur += g
    grads[key] = cur


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}: only one side may broadcast")
    return shape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b)
        ctx.save(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b)
        ctx.save(a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_broadcast(a, b)
        ctx.save(a, b)
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = _unbroadcast(g * b, a.shape) if ctx.needs_input_grad[0] else None
        gb = _unbroadcast(g * a, b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class Reciprocal(Function):
    @staticmethod
    def forward(ctx, a):
        out = 1.0 / a
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return -g * out * out


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        # tanh form is overflow-free and gives exactly 0.5 at 0
        out = 0.5 * (1.0 + np.tanh(0.5 * a))
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return g * out * (1.0 - out)


class Tanh(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.tanh(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return g * (1.0 - out * out)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx.save(mask)
        return np.where(mask, a, 0.0)

    @staticmethod
    def backward(ctx, g):
        (mask,) = ctx.saved
        return np.where(mask, g, 0.0)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        out = np.exp(a)
        ctx.save(out)
        return out

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved
        return g * out


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return g / a


class GradScale(Function):
    """Identity forward; multiplies the incoming gradient by ``factor``."""

    @staticmethod
    def forward(ctx, a, factor=1.0):
        ctx.save(factor)
        return a

    @staticmethod
    def backward(ctx, g):
        (factor,) = ctx.saved
        return g * factor


_ELEMENTWISE = {
    "add": lambda a, b: Add.apply(a, b),
    "mul": lambda a, b: Mul.apply(a, b),
    "sigmoid": lambda a, b=None: Sigmoid.apply(a),
    "tanh": lambda a, b=None: Tanh.apply(a),
    "relu": lambda a, b=None: Relu.apply(a),
}


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply one of add, mul, sigmoid, tanh, relu."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "mul") and b is None:
        raise ValueError(f"{op} needs two operands")
    return fn(a, b)


def sigmoid(x):
    return Sigmoid.apply(x)


def tanh(x):
    return Tanh.apply(x)


def relu(x):
    return Relu.apply(x)


def grad_scale(x, factor: float) -> Tensor:
    return GradScale.apply(x, factor=factor)


# ---------------------------------------------------------------------------
# shape and reduction ops
# ---------------------------------------------------------------------------

class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.save(a.shape, axis, keepdims)
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape=()):
        ctx.save(a.shape)
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        return g.reshape(shape)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx.save(axes)
        return a.transpose(axes)

    @staticmethod
    def backward(ctx, g):
        (axes,) = ctx.saved
        return g.transpose(np.argsort(axes))


class Index(Function):
    @staticmethod
    def forward(ctx, a, index=()):
        ctx.save(a.shape, index)
        return a[index]

    @staticmethod
    def backward(ctx, g):
        shape, index = ctx.saved
        if _is_basic(index):
            return SparseGrad(shape, index, g)
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return out


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


class Stack(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save(len(arrays), axis)
        return np.stack(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        n, axis = ctx.saved
        axis = axis % g.ndim
        lead = (slice(None),) * axis
        return tuple(g[lead + (i,)] for i in range(n))


def stack(tensors, axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis=0):
        ctx.save([a.shape[axis] for a in arrays], axis)
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        sizes, axis = ctx.saved
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


def concat(tensors, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


class MatMul(Function):
    """``a[..., k] @ b[k, n]`` or plain 2-D matrix product."""

    @staticmethod
    def forward(ctx, a, b):
        if b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"cannot matmul shapes {a.shape} and {b.shape}")
        ctx.save(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = g @ b.T if ctx.needs_input_grad[0] else None
        gb = None
        if ctx.needs_input_grad[1]:
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb


class LogSoftmax(Function):
    @staticmethod
    def forward(ctx, a, axis=-1):
        shifted = a - a.max(axis=axis, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        ctx.save(out, axis)
        return out

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx.saved
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# convolution, pooling, normalization
# ---------------------------------------------------------------------------

def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[O,C,k,k]`` plus bias."""

    @staticmethod
    def forward(ctx, x, w, b=None, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if c != ci:
            raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
        ho = conv_output_extent(h, kh, stride, padding)
        wo = conv_output_extent(wd, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d input {x.shape} too small for kernel {w.shape}")
        if kh == 1 and kw == 1 and padding == 0:
            xs = x[:, :, ::stride, ::stride]
            out = np.tensordot(w[:, :, 0, 0], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        if b is not None:
            out += b[None, :, None, None]
        ctx.save(x, w, stride, padding, (ho, wo))
        return out

    @staticmethod
    def backward(ctx, g):
        x, w, stride, padding, (ho, wo) = ctx.saved
        o, c, kh, kw = w.shape
        need_x, need_w, need_b = ctx.needs_input_grad
        gx = gw = gb = None
        if need_b:
            gb = g.sum(axis=(0, 2, 3))
        if kh == 1 and kw == 1 and padding == 0:
            xs = x[:, :, ::stride, ::stride]
            if need_w:
                gw = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if need_x:
                back = np.tensordot(g, w[:, :, 0, 0], axes=([1], [0])).transpose(0, 3, 1, 2)
                if stride == 1:
                    gx = np.ascontiguousarray(back)
                else:
                    gx = np.zeros(x.shape, dtype=DTYPE)
                    gx[:, :, ::stride, ::stride] = back
            return gx, gw, gb
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        if need_w:
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if need_x:
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            # g[N,O,ho,wo] x w[O,C,kh,kw] -> [N,ho,wo,C,kh,kw]
            cols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j]
            gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        return gx, gw, gb


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


class MaxPool2d(Function):
    """Non-overlapping ``size``x``size`` max pooling; extents must divide."""

    @staticmethod
    def forward(ctx, x, size=2):
        n, c, h, w = x.shape
        if h % size or w % size:
            raise ShapeError(f"max_pool2d: extent {h}x{w} not divisible by {size}")
        blocks = x.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // size, w // size, size * size)
        arg = blocks.argmax(axis=-1)
        ctx.save(x.shape, size, arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        shape, size, arg = ctx.saved
        n, c, h, w = shape
        blocks = np.zeros(g.shape + (size * size,), dtype=DTYPE)
        np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(shape)


def max_pool2d(x, size: int = 2) -> Tensor:
    return MaxPool2d.apply(x, size=size)


class BatchNormTrain(Function):
    """Normalize with statistics over ``axes``; gamma/beta pre-shaped to broadcast."""

    @staticmethod
    def forward(ctx, x, gamma, beta, axes=(0,), eps=1e-5):
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise ValueError(f"batch_norm: degenerate statistics, {count} value(s) per channel in train mode")
        mean = x.mean(axis=axes, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat, inv, gamma, beta.shape, axes, count)
        ctx.stats = (mean, var)
        return gamma * xhat + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma, bshape, axes, count = ctx.saved
        gx = ggamma = gbeta = None
        if ctx.needs_input_grad[0]:
            gxhat = g * gamma
            gx = (inv / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        if ctx.needs_input_grad[1]:
            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if ctx.needs_input_grad[2]:
            gbeta = _unbroadcast(g, bshape)
        return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    non_finite: bool = False
    n_checked: int = 0
    worst_index: tuple | None = None
    details: dict = field(default_factory=dict)


def finite_diff_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-4,
                      floor: float = 1e-6, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> CheckReport:
    """Compare autodiff gradients of scalar ``f(x)`` with central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``x`` is perturbed in place and restored afterwards.  With
    ``max_coords`` only a random subset of coordinates is differenced.
    """
    saved_grad, saved_flag = x.grad, x.requires_grad
    x.grad, x.requires_grad = None, True
    try:
        with np.errstate(all="ignore"):
            out = f(x)
            if not np.all(np.isfinite(out.data)):
                return CheckReport(float("inf"), False, non_finite=True)
            out.backward()
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
        if not np.all(np.isfinite(analytic)):
            return CheckReport(float("inf"), False, non_finite=True)
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst, worst_i = 0.0, None
        with no_grad(), np.errstate(all="ignore"):
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                up = f(x).item()
                flat[i] = orig - step
                down = f(x).item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    return CheckReport(float("inf"), False, non_finite=True, n_checked=len(coords))
                numeric = (up - down) / (2 * step)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                if err > worst:
                    worst, worst_i = err, np.unravel_index(i, x.shape)
        return CheckReport(float(worst), bool(worst < tol), n_checked=len(coords), worst_index=worst_i)
    finally:
        x.grad, x.requires_grad = saved_grad, saved_flag


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"STNT"
VERSION = 1


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor blob version {version}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != offset + 8 * count:
        raise ValueError("tensor blob truncated or oversized")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(DTYPE).reshape(shape)
    return Tensor(data)


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
