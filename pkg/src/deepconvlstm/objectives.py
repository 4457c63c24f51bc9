"""Per-timestep cross-entropy and CTC loss, each with a brute-force reference."""
from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp

from .tensor import Function, ShapeError, Tensor, log_softmax, softmax_np

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz' "


class CTCInfeasibleError(ValueError):
    """The target cannot be emitted in the available number of frames."""


def sequence_cross_entropy(outputs: Tensor, targets, weight: float | None = None) -> Tensor:
    """Mean negative log-likelihood of each sequence's class at every timestep.

    ``outputs`` is ``[B, T, K]``; ``targets`` holds one class index per
    sequence.  ``weight`` replaces the ``1/(B*T)`` normalizer (truncated
    BPTT uses ``1/(B*T_total)`` so window losses add up to the sequence loss).
    """
    b, t, k = outputs.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != b:
        raise ShapeError(f"{targets.shape[0]} targets for batch of {b}")
    if np.any(targets < 0) or np.any(targets >= k):
        raise ValueError(f"target index out of range [0, {k})")
    logp = log_softmax(outputs, axis=-1)
    picked = logp[np.arange(b)[:, None], np.arange(t)[None, :], targets[:, None]]
    scale = 1.0 / (b * t) if weight is None else weight
    return picked.sum() * (-scale)


def sequence_cross_entropy_oracle(outputs: np.ndarray, targets) -> float:
    """Elementwise loop over batch and time; independent of the tape."""
    total, count = 0.0, 0
    for bi, row in enumerate(np.asarray(outputs)):
        for logits in row:
            m = max(logits)
            lse = m + np.log(sum(np.exp(v - m) for v in logits))
            total += lse - logits[targets[bi]]
            count += 1
    return total / count


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def ctc_min_frames(target) -> int:
    """Frames needed: one per label plus a blank between repeated labels."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _extended(target, blank):
    ext = [blank]
    for c in target:
        ext += [c, blank]
    return np.asarray(ext, dtype=np.int64)


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left when negative), filling with log 0."""
    out = np.full_like(v, -np.inf)
    if k > 0:
        out[k:] = v[:-k]
    elif k < 0:
        out[:k] = v[-k:]
    else:
        out[:] = v
    return out


def _ctc_alpha_beta(logp: np.ndarray, target, blank: int):
    t_len = logp.shape[0]
    ext = _extended(target, blank)
    s_len = len(ext)
    neg = -np.inf
    # skip transitions s-2 -> s allowed when ext[s] is a label differing from ext[s-2]
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # [T, S]

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), neg)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), jump) + emit[t]

    # beta[t, s]: log prob of emitting the rest from t+1 on, being in s at t
    beta = np.full((t_len, s_len), neg)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        jump = np.where(skip_from, _shift(nxt, -2), neg)
        beta[t] = np.logaddexp(np.logaddexp(nxt, _shift(nxt, -1)), jump)
    return ext, alpha, beta


class CTCLoss(Function):
    @staticmethod
    def forward(ctx, logits, target=(), blank=0):
        if logits.ndim != 2:
            raise ShapeError(f"ctc_loss expects [T, K] logits, got {logits.shape}")
        t_len, k = logits.shape
        target = [int(c) for c in target]
        if any(c == blank or c < 0 or c >= k for c in target):
            raise ValueError("CTC target must use non-blank indices inside the alphabet")
        need = ctc_min_frames(target)
        if need > t_len:
            raise CTCInfeasibleError(f"target needs {need} frames but only {t_len} are available")
        logp = logits - logsumexp(logits, axis=1, keepdims=True)
        ext, alpha, beta = _ctc_alpha_beta(logp, target, blank)
        last = alpha[-1, -1] if len(ext) == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
        ctx.save(logp, ext, alpha, beta, last)
        return np.asarray(-last)

    @staticmethod
    def backward(ctx, g):
        logp, ext, alpha, beta, log_lik = ctx.saved
        t_len, k = logp.shape
        occupancy = np.exp(alpha + beta - log_lik)  # [T, S]
        per_class = np.zeros((t_len, k))
        for s, c in enumerate(ext):
            per_class[:, c] += occupancy[:, s]
        return g * (np.exp(logp) - per_class)


def ctc_loss(outputs: Tensor, target, blank: int = 0) -> Tensor:
    """Negative log-likelihood of ``target`` under per-frame logits ``outputs[T, |S|+1]``."""
    return CTCLoss.apply(outputs, target=tuple(int(c) for c in target), blank=blank)


def batch_ctc_loss(outputs: Tensor, targets, blank: int = 0) -> Tensor:
    """Mean CTC loss over a ``[B, T, K]`` batch."""
    losses = [ctc_loss(outputs[i], tgt, blank) for i, tgt in enumerate(targets)]
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def collapse(path, blank: int = 0) -> tuple:
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


def ctc_oracle(outputs, target, blank: int = 0, max_frames: int = 8) -> float:
    """Brute-force CTC negative log-likelihood by enumerating every path.

    Returns ``inf`` when no path collapses to the target.
    """
    logits = outputs.data if isinstance(outputs, Tensor) else np.asarray(outputs, dtype=np.float64)
    t_len, k = logits.shape
    if t_len > max_frames:
        raise ValueError(f"ctc_oracle enumerates {k}^{t_len} paths; refusing T > {max_frames}")
    probs = softmax_np(logits, axis=1)
    target = tuple(int(c) for c in target)
    total = 0.0
    for path in itertools.product(range(k), repeat=t_len):
        if collapse(path, blank) == target:
            total += float(np.prod(probs[np.arange(t_len), path]))
    return float("inf") if total == 0.0 else -np.log(total)


def encode_text(text: str, alphabet: str = DEFAULT_ALPHABET) -> list:
    """Characters to indices; index 0 is reserved for the blank."""
    try:
        return [alphabet.index(ch) + 1 for ch in text]
    except ValueError:
        bad = next(ch for ch in text if ch not in alphabet)
        raise ValueError(f"character {bad!r} not in alphabet") from None


def greedy_decode(outputs, blank: int = 0) -> tuple:
    logits = outputs.data if isinstance(outputs, Tensor) else np.asarray(outputs)
    return collapse(logits.argmax(axis=-1), blank)
