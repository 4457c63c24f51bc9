"""Convolutional LSTM cell, per-sequence state handling and bidirectional fusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import LstmState, Module, _param, lstm_gates
from .tensor import ShapeError, Tensor, conv2d, conv_output_extent, softmax_np, stack

ConvLstmState = LstmState

SCALES = ("s", "s/2", "s/4", "s/8", "s/16", "final-lstm")


class NoMatchError(LookupError):
    """A state selector matched no recurrent layer."""


class ConvLSTM(Module):
    """ConvLSTM layer; gate order in the stacked filters is f, i, o, c.

    With ``stride=2`` only the input filters downsample, so the cell and
    hidden state live at the reduced extent.  Recurrent filters always use
    stride 1 and same padding.
    """

    kind = "convlstm"
    recurrent = True

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None, scale: str = "s", name: str = "convlstm",
                 forget_bias: float = 1.0):
        if kernel not in (1, 3):
            raise ValueError(f"ConvLSTM kernel must be 1 or 3, got {kernel}")
        if stride not in (1, 2):
            raise ValueError(f"ConvLSTM stride must be 1 or 2, got {stride}")
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2
        fan_x = in_ch * kernel * kernel
        fan_h = out_ch * kernel * kernel
        self.weight_x = _param(rng.normal(0.0, np.sqrt(1.0 / fan_x), (4 * out_ch, in_ch, kernel, kernel)))
        self.weight_h = _param(rng.normal(0.0, np.sqrt(1.0 / fan_h), (4 * out_ch, out_ch, kernel, kernel)))
        bias = np.zeros(4 * out_ch)
        bias[:out_ch] = forget_bias
        self.bias = _param(bias)
        self.scale = scale
        self.name = name

    # per-gate views of the stacked filters
    def _gate(self, t: Tensor, k: int) -> np.ndarray:
        return t.data[k * self.out_ch:(k + 1) * self.out_ch]

    W_f = property(lambda self: self._gate(self.weight_x, 0))
    W_i = property(lambda self: self._gate(self.weight_x, 1))
    W_o = property(lambda self: self._gate(self.weight_x, 2))
    W_c = property(lambda self: self._gate(self.weight_x, 3))
    U_f = property(lambda self: self._gate(self.weight_h, 0))
    U_i = property(lambda self: self._gate(self.weight_h, 1))
    U_o = property(lambda self: self._gate(self.weight_h, 2))
    U_c = property(lambda self: self._gate(self.weight_h, 3))
    b_f = property(lambda self: self._gate(self.bias, 0))
    b_i = property(lambda self: self._gate(self.bias, 1))
    b_o = property(lambda self: self._gate(self.bias, 2))
    b_c = property(lambda self: self._gate(self.bias, 3))

    def out_extent(self, extent: int) -> int:
        return conv_output_extent(extent, self.kernel, self.stride, self.padding)

    def input_projection(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight_x, self.bias, self.stride, self.padding)

    def advance(self, zx: Tensor, state: LstmState | None) -> LstmState:
        """Finish one step given the input projection ``W*x_t + b``."""
        z, c_prev, t = zx, None, 0
        if state is not None:
            if state.h.shape[1] != self.out_ch or state.h.shape[2:] != zx.shape[2:]:
                raise ShapeError(f"state shape {state.h.shape} does not match step output {zx.shape}")
            z = zx + conv2d(state.h, self.weight_h, None, 1, self.padding)
            c_prev, t = state.c, state.t
        h, c = lstm_gates(z, c_prev, self.out_ch, axis=1)
        return LstmState(c, h, t + 1)

    def __call__(self, x: Tensor, store=None, policy=None) -> Tensor:
        """Run over ``x[B, T, C, H, W]``; returns hidden states ``[B, T, O, H', W']``."""
        if x.ndim != 5:
            raise ShapeError(f"ConvLSTM sequence input must be 5-D, got {x.shape}")
        b, t_len = x.shape[:2]
        if x.shape[2] != self.in_ch:
            raise ShapeError(f"ConvLSTM expects {self.in_ch} input channels, got shape {x.shape}")
        zx = self.input_projection(x.reshape((b * t_len,) + x.shape[2:]))
        zx = zx.reshape((b, t_len) + zx.shape[1:])
        t0 = 0 if store is None else store.time_offset
        state = None if store is None else store.get(self.name)
        outs = []
        for t in range(t_len):
            if policy is not None and policy.fires(self, t0 + t):
                state = None
            state = self.advance(zx[:, t], state)
            outs.append(state.h)
        if store is not None:
            store.put(self.name, state)
        return stack(outs, axis=1)


def convlstm_step(layer: ConvLSTM, x_t: Tensor, state: LstmState | None):
    """One application of the cell to ``x_t[B, C, H, W]``; returns ``(h_t, new_state)``."""
    if x_t.ndim != 4 or x_t.shape[1] != layer.in_ch:
        raise ShapeError(f"ConvLSTM step expects [B,{layer.in_ch},H,W], got {x_t.shape}")
    if state is not None:
        expect = (x_t.shape[0], layer.out_ch, layer.out_extent(x_t.shape[2]), layer.out_extent(x_t.shape[3]))
        if state.h.shape != expect or state.c.shape != expect:
            raise ShapeError(f"state shape {state.h.shape} does not match layer output {expect}")
    new = layer.advance(layer.input_projection(x_t), state)
    return new.h, new


@dataclass
class StateStore:
    """Recurrent state of every layer for the sequence in flight.

    ``time_offset`` is the absolute index of the next frame, so reset
    periods line up across truncated-BPTT windows.  Locked-dropout masks
    are kept here too so one mask covers the whole sequence.
    """

    states: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    time_offset: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def get(self, name: str):
        return self.states.get(name)

    def put(self, name: str, state):
        self.states[name] = state

    def clear(self):
        self.states.clear()
        self.masks.clear()
        self.time_offset = 0

    def detach(self):
        """Keep state values but cut their gradient history."""
        self.states = {k: v.detach() for k, v in self.states.items()}


@dataclass(frozen=True)
class ResetPolicy:
    """Zero selected recurrent states at t = T, 2T, ... (never at t = 0)."""

    scales: frozenset = frozenset()
    period: int = 1

    def __post_init__(self):
        if self.period < 1:
            raise ValueError(f"reset period must be >= 1, got {self.period}")

    @classmethod
    def parse(cls, scale: str, period: int) -> "ResetPolicy":
        if scale == "none":
            return cls(frozenset(), period)
        if scale == "all":
            return cls(frozenset(SCALES), period)
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}; expected one of {SCALES + ('all', 'none')}")
        return cls(frozenset([scale]), period)

    def selects(self, layer) -> bool:
        return layer.scale in self.scales

    def fires(self, layer, t: int) -> bool:
        return t > 0 and t % self.period == 0 and layer.scale in self.scales


def _recurrent_layers(layers):
    found = []
    for item in layers:
        mods = item.modules() if isinstance(item, Module) else [item]
        found.extend(m for m in mods if getattr(m, "recurrent", False))
    return found


def check_policy(layers, policy: ResetPolicy | None):
    if policy is None or not policy.scales:
        return
    if not any(policy.selects(m) for m in _recurrent_layers(layers)):
        raise NoMatchError(f"reset policy scales {sorted(policy.scales)} match no recurrent layer")


def run_sequence(layers, x: Tensor, store: StateStore | None = None,
                 reset_policy: ResetPolicy | None = None) -> Tensor:
    """Feed ``x[B, T, ...]`` through ``layers`` in order, carrying state in ``store``."""
    check_policy(layers, reset_policy)
    store = store if store is not None else StateStore()
    out = x
    for layer in layers:
        out = layer(out, store, reset_policy)
    store.time_offset += x.shape[1]
    return out


def reset_states(store: StateStore, layers, selector) -> list:
    """Zero the state of the layers picked by ``selector``.

    ``selector`` is a scale tag, ``"all"``, a layer name, or a collection of
    those.  Returns the names reset; raises :class:`NoMatchError` when
    nothing matches.
    """
    wanted = {selector} if isinstance(selector, str) else set(selector)
    chosen = [m for m in _recurrent_layers(layers)
              if "all" in wanted or m.scale in wanted or m.name in wanted]
    if not chosen:
        raise NoMatchError(f"selector {sorted(wanted)} matches no recurrent layer")
    for m in chosen:
        store.states.pop(m.name, None)
    return [m.name for m in chosen]


def bidirectional_fuse(forward_out, reverse_out) -> np.ndarray:
    """Average final-timestep softmax probabilities of the two directions."""
    f = forward_out.data if isinstance(forward_out, Tensor) else np.asarray(forward_out)
    r = reverse_out.data if isinstance(reverse_out, Tensor) else np.asarray(reverse_out)
    if f.shape != r.shape:
        raise ShapeError(f"cannot fuse shapes {f.shape} and {r.shape}")
    return 0.5 * (softmax_np(f[:, -1]) + softmax_np(r[:, -1]))
