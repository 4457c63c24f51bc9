"""Self-check suites: gradient oracles, CTC enumeration, layer census and the TBPTT contract."""
from __future__ import annotations

import time

import numpy as np

from .arch import BlockA, BlockB, Head, SequenceModel, build_model, census, full_scale_spec, reduced_spec
from .convlstm import ConvLSTM, LstmState, StateStore, convlstm_step
from .data import SequenceBatch
from .layers import BatchNorm, DenseLSTM
from .objectives import ctc_loss, ctc_min_frames, ctc_oracle, sequence_cross_entropy
from .tensor import Tensor, conv2d, finite_diff_check, grad_scale

GRAD_TOL = 1e-4
CTC_TOL = 1e-9


def _rng(seed):
    return np.random.default_rng(seed)


def _probe_weights(shape, seed):
    return _rng([seed, 99]).normal(size=shape)


def _weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Random linear functional of ``out`` so every output coordinate matters."""
    return (out * _probe_weights(out.shape, seed)).sum()


def _check(name, fn, tensors, results, max_coords=None):
    worst, ok = 0.0, True
    for label, t in tensors:
        rep = finite_diff_check(fn, t, step=1e-6, tol=GRAD_TOL, max_coords=max_coords, rng=_rng(1))
        worst = max(worst, rep.max_rel_error)
        ok &= rep.passed
        results.append({"case": f"{name}:{label}", "max_rel_error": rep.max_rel_error, "passed": rep.passed})
    return ok


def gradient_cases():
    """Yield ``(name, loss_fn, [(label, tensor), ...])`` for each oracle case."""
    rng = _rng(0)

    # conv2d, including stride and padding
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=4))
    for stride in (1, 2):
        f = (lambda s: lambda _: _weighted_sum(conv2d(x, w, b, s, 1), 1))(stride)
        yield f"conv2d/stride{stride}", f, [("x", x), ("w", w), ("b", b)]

    # batch norm in training mode on a [B, T, C, H, W] sequence
    bn = BatchNorm(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, 3)
    bn.beta.data = rng.normal(size=3)
    xs = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
    yield "batch_norm", lambda _: _weighted_sum(bn(xs), 2), [("x", xs), ("gamma", bn.gamma), ("beta", bn.beta)]

    # dense LSTM over a short sequence
    lstm = DenseLSTM(4, 3, rng=rng)
    xd = Tensor(rng.normal(size=(2, 3, 4)))
    yield "dense_lstm", lambda _: _weighted_sum(lstm(xd, StateStore()), 3), [
        ("x", xd), ("weight_x", lstm.weight_x), ("weight_h", lstm.weight_h), ("bias", lstm.bias)]

    # one ConvLSTM step from a non-zero state
    cell = ConvLSTM(2, 3, 3, 1, rng=rng)
    xt = Tensor(rng.normal(size=(2, 2, 4, 4)))
    st = LstmState(Tensor(rng.normal(size=(2, 3, 4, 4))), Tensor(rng.normal(size=(2, 3, 4, 4))), 1)

    def step_loss(_):
        h, new = convlstm_step(cell, xt, st)
        return _weighted_sum(h, 4) + _weighted_sum(new.c, 5)

    yield "convlstm_step", step_loss, [("x", xt), ("c", st.c), ("h", st.h), ("weight_x", cell.weight_x),
                                       ("weight_h", cell.weight_h), ("bias", cell.bias)]

    # residual blocks over two frames
    block_a = BlockA(3, 2, 4, stride=2, scale="s", rng=rng)
    xa = Tensor(rng.uniform(0.0, 1.0, size=(2, 2, 3, 4, 4)))
    yield "block_a", lambda _: _weighted_sum(block_a(xa, StateStore()), 6), [
        ("x", xa), ("lstm.weight_h", block_a.lstm.weight_h), ("skip.weight_x", block_a.skip.weight_x),
        ("reduce.weight", block_a.reduce.weight)]

    block_b = BlockB(3, 2, scale="s", rng=rng)
    xb = Tensor(rng.uniform(0.0, 1.0, size=(2, 2, 3, 4, 4)))
    yield "block_b", lambda _: _weighted_sum(block_b(xb, StateStore()), 7), [
        ("x", xb), ("lstm.weight_x", block_b.lstm.weight_x), ("expand.weight", block_b.expand.weight)]

    # losses
    logits = Tensor(rng.normal(size=(3, 4, 5)))
    labels = [0, 3, 4]
    yield "sequence_cross_entropy", lambda t: sequence_cross_entropy(t, labels), [("logits", logits)]

    ctc_logits = Tensor(rng.normal(size=(6, 4)))
    yield "ctc", lambda t: ctc_loss(t, [1, 2, 2]), [("logits", ctc_logits)]


def gradient_suite() -> dict:
    start = time.perf_counter()
    results, ok = [], True
    for name, fn, tensors in gradient_cases():
        for _, t in tensors:
            t.requires_grad = True
        ok &= _check(name, fn, tensors, results)
    return {"suite": "gradients", "passed": bool(ok), "cases": results,
            "seconds": time.perf_counter() - start}


def random_ctc_instance(rng: np.random.Generator, max_t=6, max_len=3, max_alphabet=4):
    """Random logits and a feasible target: ``T <= max_t``, ``|S| <= max_len``, alphabet incl. blank."""
    k = int(rng.integers(2, max_alphabet + 1))
    while True:
        t_len = int(rng.integers(1, max_t + 1))
        n = int(rng.integers(0, max_len + 1))
        target = [int(c) for c in rng.integers(1, k, size=n)]
        if ctc_min_frames(target) <= t_len:
            return rng.normal(scale=2.0, size=(t_len, k)), target


def ctc_suite(n: int = 200, seed: int = 0) -> dict:
    start = time.perf_counter()
    rng = _rng(seed)
    worst = 0.0
    for _ in range(n):
        logits, target = random_ctc_instance(rng)
        got = ctc_loss(Tensor(logits), target).item()
        want = ctc_oracle(logits, target)
        worst = max(worst, abs(got - want))
    return {"suite": "ctc", "passed": bool(worst < CTC_TOL), "instances": n, "max_abs_error": float(worst),
            "seconds": time.perf_counter() - start}


EXPECTED_CENSUS = {"convlstm_3x3": 14, "convlstm_1x1": 4, "conv2d_1x1": 28, "dense_lstm": 1, "total": 48}


def census_suite() -> dict:
    start = time.perf_counter()
    model = build_model(full_scale_spec())
    c = census(model).as_dict()
    n_params = model.num_parameters()
    checks = {key: c.get(key) == want for key, want in EXPECTED_CENSUS.items()}
    checks["s/4_layers"] = c["by_scale"].get("s/4") == 19
    checks["parameters"] = abs(n_params - 14.5e6) <= 0.15 * 14.5e6
    return {"suite": "census", "passed": all(checks.values()), "checks": checks, "census": c,
            "parameters": n_params, "seconds": time.perf_counter() - start}


# ---------------------------------------------------------------------------
# truncated BPTT
# ---------------------------------------------------------------------------

def toy_recurrent_model(seed: int = 0, classes: int = 3) -> SequenceModel:
    """Two ConvLSTM layers and the pooled dense-LSTM head, without normalization or dropout."""
    rng = _rng(seed)
    layers = [ConvLSTM(1, 3, 3, 1, rng=rng, scale="s"), ConvLSTM(3, 4, 1, 2, rng=rng, scale="s/2"),
              Head(4, 5, classes, 0.0, rng)]
    spec = reduced_spec(classes)
    return SequenceModel(spec, layers, [8, 4])


def toy_batch(seed: int = 0, b: int = 2, t_len: int = 24, extent: int = 8, classes: int = 3) -> SequenceBatch:
    rng = _rng([seed, 1])
    frames = rng.uniform(size=(b, t_len, 1, extent, extent))
    return SequenceBatch(frames, [int(c) for c in rng.integers(classes, size=b)], [t_len] * b)


def _grads(model):
    return [None if p.grad is None else p.grad.copy() for p in model.parameters()]


def masked_boundary(store: StateStore):
    """Keep values but zero the gradient flowing back through window boundaries."""
    store.states = {k: LstmState(grad_scale(v.c, 0.0), grad_scale(v.h, 0.0), v.t)
                    for k, v in store.states.items()}


def tbptt_suite(seed: int = 0) -> dict:
    from .training import Adam, TbpttConfig, tbptt_gradients, train_sequence_tbptt

    start = time.perf_counter()
    model = toy_recurrent_model(seed)
    batch = toy_batch(seed)
    t_len = batch.frames.shape[1]

    model.zero_grad()
    win = tbptt_gradients(model, batch, TbpttConfig(8), seed)
    g_win = _grads(model)

    model.zero_grad()
    masked = tbptt_gradients(model, batch, TbpttConfig(8), seed, boundary=masked_boundary)
    g_masked = _grads(model)

    model.zero_grad()
    full = tbptt_gradients(model, batch, TbpttConfig(t_len), seed)
    g_full = _grads(model)

    model.zero_grad()
    store = StateStore(rng=_rng(seed))
    ref_out = model(Tensor(batch.frames), store)
    sequence_cross_entropy(ref_out, batch.labels, weight=1.0 / (batch.frames.shape[0] * t_len)).backward()
    g_ref = _grads(model)
    model.zero_grad()

    opt = Adam(model.parameters(), lr=1e-3)
    trained = train_sequence_tbptt(model, batch, TbpttConfig(8), opt, seed)

    masked_err = max(float(np.max(np.abs(a - b))) for a, b in zip(g_win, g_masked))
    checks = {
        "backward_passes": win["backward_passes"] == 3,
        "windows": win["windows"] == 3,
        "one_update_per_sequence": trained["updates"] == 1 and opt.step_count == 1
                                   and trained["backward_passes"] == 3,
        "forward_bit_identical": bool(np.array_equal(win["outputs"], full["outputs"])
                                      and np.array_equal(full["outputs"], ref_out.data)),
        "window_eq_T_matches_full_bptt": all(np.array_equal(a, b) for a, b in zip(g_full, g_ref)),
        "windowed_matches_masked_full_bptt": masked_err < 1e-12,
    }
    return {"suite": "tbptt", "passed": all(checks.values()), "checks": checks,
            "masked_max_abs_diff": masked_err, "seconds": time.perf_counter() - start}


SUITES = {"gradients": gradient_suite, "ctc": ctc_suite, "census": census_suite, "tbptt": tbptt_suite}


def run_suites(names=None) -> dict:
    names = list(SUITES) if not names else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    reports = {name: SUITES[name]() for name in names}
    return {"passed": all(r["passed"] for r in reports.values()), "suites": reports}
