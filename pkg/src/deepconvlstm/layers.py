"""Non-recurrent building blocks plus the dense LSTM.

Layers that see a whole sequence take ``[B, T, C, H, W]`` (images) or
``[B, T, F]`` (vectors) tensors.  Convolutions fold time into the batch;
batch normalization keeps separate statistics for each timestep.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormTrain,
    ShapeError,
    Tensor,
    conv2d,
    conv_output_extent,
    max_pool2d,
    sigmoid,
    stack,
    tanh,
)


@dataclass
class LstmState:
    """Cell and hidden state of one recurrent layer; ``t`` counts steps taken."""

    c: Tensor
    h: Tensor
    t: int = 0

    def detach(self) -> "LstmState":
        return LstmState(self.c.detach(), self.h.detach(), self.t)


class Module:
    """Minimal parameter container; attribute order fixes parameter order."""

    training = True
    _buffers: tuple = ()

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")

    def modules(self):
        return [m for _, m in self.named_modules()]

    def named_buffers(self):
        for path, mod in self.named_modules():
            for b in mod._buffers:
                yield (f"{path}.{b}" if path else b), mod, b

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, mod, attr in self.named_buffers():
            state[name] = np.array(getattr(mod, attr), dtype=np.float64, copy=True)
        return state

    def load_state_dict(self, state: dict):
        params = dict(self.named_parameters())
        buffers = {name: (mod, attr) for name, mod, attr in self.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state dict lacks {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
        for name, (mod, attr) in buffers.items():
            setattr(mod, attr, np.asarray(state[name], dtype=np.float64).copy())

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def _fold_time(x: Tensor):
    """[B,T,C,H,W] -> ([B*T,C,H,W], (B,T)); 4-D input passes through."""
    if x.ndim == 5:
        b, t = x.shape[:2]
        return x.reshape((b * t,) + x.shape[2:]), (b, t)
    if x.ndim == 4:
        return x, None
    raise ShapeError(f"expected 4-D or 5-D image tensor, got shape {x.shape}")


def _unfold_time(x: Tensor, bt):
    return x if bt is None else x.reshape(bt + x.shape[1:])


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)))
        self.bias = _param(np.zeros(out_ch))

    def out_extent(self, extent: int) -> int:
        return conv_output_extent(extent, self.kernel, self.stride, self.padding)

    def __call__(self, x: Tensor, *_, **__) -> Tensor:
        flat, bt = _fold_time(x)
        return _unfold_time(conv2d(flat, self.weight, self.bias, self.stride, self.padding), bt)


class MaxPool(Module):
    kind = "pool"

    def __init__(self, size: int = 2):
        self.size = size

    def __call__(self, x: Tensor, *_, **__) -> Tensor:
        flat, bt = _fold_time(x)
        return _unfold_time(max_pool2d(flat, self.size), bt)


class BatchNorm(Module):
    """Batch normalization; in train mode each timestep gets its own statistics."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def _layout(self, x: Tensor):
        # (channel axis, reduction axes, time axis or None)
        if x.ndim == 5:
            return 2, (0, 3, 4), 1
        if x.ndim == 4:
            return 1, (0, 2, 3), None
        if x.ndim == 3:
            return 2, (0,), 1
        if x.ndim == 2:
            return 1, (0,), None
        raise ShapeError(f"batch_norm: unsupported input rank {x.ndim}")

    def __call__(self, x: Tensor, *_, **__) -> Tensor:
        ch_axis, axes, t_axis = self._layout(x)
        if x.shape[ch_axis] != self.channels:
            raise ShapeError(f"batch_norm: expected {self.channels} channels, got shape {x.shape}")
        bshape = [1] * x.ndim
        bshape[ch_axis] = self.channels
        bshape = tuple(bshape)
        if self.training:
            out = BatchNormTrain.apply(x, self.gamma.reshape(bshape), self.beta.reshape(bshape),
                                       axes=axes, eps=self.eps)
            self._update_running(x.data, axes, t_axis, ch_axis)
            return out
        scale = self.gamma * (1.0 / np.sqrt(self.running_var + self.eps))
        shift = self.beta - scale * self.running_mean
        return x * scale.reshape(bshape) + shift.reshape(bshape)

    def _update_running(self, data, axes, t_axis, ch_axis):
        count = int(np.prod([data.shape[a] for a in axes]))
        mean = data.mean(axis=axes, keepdims=True)
        var = ((data - mean) ** 2).mean(axis=axes, keepdims=True) * count / (count - 1)
        keep = tuple(a for a in range(data.ndim) if a != ch_axis)
        m = self.momentum
        self.running_mean = (1 - m) * self.running_mean + m * mean.mean(axis=keep)
        self.running_var = (1 - m) * self.running_var + m * var.mean(axis=keep)


def lstm_gates(z: Tensor, c_prev: Tensor | None, hidden: int, axis: int = 1):
    """Split pre-activations (gate order f, i, o, c) and advance the cell.

    Returns ``(h, c)``; a ``None`` previous cell counts as zero.
    """
    def part(k):
        index = (slice(None),) * axis + (slice(k * hidden, (k + 1) * hidden),)
        return z[index]

    f = sigmoid(part(0))
    i = sigmoid(part(1))
    o = sigmoid(part(2))
    g = tanh(part(3))
    c = i * g if c_prev is None else f * c_prev + i * g
    h = o * tanh(c)
    return h, c


class DenseLSTM(Module):
    """Fully connected LSTM; weights stacked per gate in order f, i, o, c."""

    kind = "dense_lstm"
    recurrent = True
    scale = "final-lstm"

    def __init__(self, in_features: int, hidden: int, rng: np.random.Generator | None = None,
                 forget_bias: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.in_features, self.hidden = in_features, hidden
        bound = 1.0 / np.sqrt(hidden)
        self.weight_x = _param(rng.uniform(-bound, bound, (in_features, 4 * hidden)))
        self.weight_h = _param(rng.uniform(-bound, bound, (hidden, 4 * hidden)))
        bias = np.zeros(4 * hidden)
        bias[:hidden] = forget_bias
        self.bias = _param(bias)
        self.name = "lstm"

    def step(self, x: Tensor, state):
        """One timestep on ``x[B, F]``; ``state`` is ``(h, c)`` or ``None``."""
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"dense LSTM expects {self.in_features} features, got shape {x.shape}")
        z = x @ self.weight_x + self.bias
        c_prev = None
        if state is not None:
            h_prev, c_prev = state
            z = z + h_prev @ self.weight_h
        h, c = lstm_gates(z, c_prev, self.hidden, axis=1)
        return h, (h, c)

    def __call__(self, x: Tensor, store=None, policy=None) -> Tensor:
        """Run over ``x[B, T, F]`` carrying state in ``store``."""
        b, t_len, _ = x.shape
        zx = x @ self.weight_x + self.bias
        outs = []
        t0 = 0 if store is None else store.time_offset
        state = None if store is None else store.get(self.name)
        for t in range(t_len):
            if policy is not None and policy.fires(self, t0 + t):
                state = None
            z = zx[:, t]
            c_prev = None
            if state is not None:
                h_prev, c_prev = state.h, state.c
                z = z + h_prev @ self.weight_h
            h, c = lstm_gates(z, c_prev, self.hidden, axis=1)
            state = LstmState(c, h, t0 + t + 1)
            outs.append(h)
        if store is not None:
            store.put(self.name, state)
        return stack(outs, axis=1)


def dense_lstm_step(layer: DenseLSTM, x: Tensor, state):
    return layer.step(x, state)


class Linear(Module):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / (in_features + out_features))
        self.weight = _param(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = _param(np.zeros(out_features))

    def __call__(self, x: Tensor, *_, **__) -> Tensor:
        return x @ self.weight + self.bias


def locked_dropout(x: Tensor, p_drop: float, rng_seed, training: bool = True,
                   time_axis: int = 0) -> Tensor:
    """Dropout with one mask per sequence, shared by every timestep.

    ``x`` holds one sequence with time along ``time_axis``.
    """
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
    if not training or p_drop == 0.0:
        return x
    shape = list(x.shape)
    shape[time_axis] = 1
    mask = draw_dropout_mask(tuple(shape), p_drop, np.random.default_rng(rng_seed))
    return x * mask


def draw_dropout_mask(shape, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - p_drop
    return (rng.random(shape) < keep).astype(np.float64) / keep


class LockedDropout(Module):
    """Sequence-level dropout whose mask lives in the per-sequence state store."""

    kind = "dropout"

    def __init__(self, p_drop: float = 0.5):
        if not 0.0 <= p_drop < 1.0:
            raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
        self.p_drop = p_drop
        self.name = "dropout"

    def __call__(self, x: Tensor, store=None, policy=None) -> Tensor:
        if not self.training or self.p_drop == 0.0:
            return x
        if store is None:
            raise ValueError("locked dropout in train mode needs a state store")
        mask = store.masks.get(self.name)
        if mask is None:
            shape = (x.shape[0], 1) + x.shape[2:]
            mask = draw_dropout_mask(shape, self.p_drop, store.rng)
            store.masks[self.name] = mask
        return x * mask
