import numpy as np
import pytest

from deepconvlstm import tensor as T
from deepconvlstm.tensor import (
    ShapeError,
    Tensor,
    conv2d,
    detect_anomaly,
    finite_diff_check,
    grad_scale,
    load_tensor,
    max_pool2d,
    no_grad,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)

from oracles import naive_conv2d


def rng(seed=0):
    return np.random.default_rng(seed)


class TestForward:
    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2), (1, 2)])
    def test_conv_matches_naive(self, k, stride):
        r = rng(k + stride)
        x, w, b = r.normal(size=(2, 3, 7, 7)), r.normal(size=(4, 3, k, k)), r.normal(size=4)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, k // 2).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, k // 2), rtol=1e-12, atol=1e-12)

    def test_conv_output_extent(self):
        assert T.conv_output_extent(48, 3, 2, 1) == 24
        assert T.conv_output_extent(3, 3, 2, 1) == 2
        assert T.conv_output_extent(5, 1, 1, 0) == 5

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    def test_broadcast_both_sides_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 1))) + Tensor(np.zeros((1, 4)))

    def test_max_pool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(max_pool2d(Tensor(x), 2).data, [[[[5, 7], [13, 15]]]])

    def test_sigmoid_extremes_finite(self):
        out = Tensor(np.array([-1000.0, 0.0, 1000.0])).sigmoid().data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])

    def test_log_softmax_normalized(self):
        x = rng().normal(size=(5, 7)) * 30
        lp = T.log_softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-12)

    def test_elementwise_dispatch(self):
        a, b = Tensor([1.0, -2.0]), Tensor([3.0, 4.0])
        np.testing.assert_array_equal(T.elementwise("add", a, b).data, [4.0, 2.0])
        np.testing.assert_array_equal(T.elementwise("relu", a).data, [1.0, 0.0])
        with pytest.raises(ValueError):
            T.elementwise("cube", a)


class TestBackward:
    def test_sum_gradient_exact(self):
        # integer inputs and a power-of-two step make the central difference exact
        x = Tensor(rng().integers(-5, 5, size=(3, 4)).astype(float))
        rep = finite_diff_check(lambda t: t.sum(), x, step=2.0 ** -16)
        assert rep.max_rel_error == 0.0 and rep.passed

    def test_gradient_accumulates_across_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(3):
            (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, 3 * 2 * x.data)

    def test_shared_subexpression(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x
        (y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(6 + 27)

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2).backward()

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad and y.is_leaf

    def test_grad_scale_zero_blocks(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (grad_scale(x * 2.0, 0.0) + x).sum()
        y.backward()
        np.testing.assert_array_equal(x.grad, np.ones(3))
        assert y.item() == 9.0

    def test_detach_cuts_history(self):
        x = Tensor(np.ones(2), requires_grad=True)
        d = (x * 3).detach()
        assert not d.requires_grad and d.is_leaf

    def test_fancy_index_repeated_rows(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        x[np.array([0, 0, 2])].sum().backward()
        np.testing.assert_array_equal(x.grad, [2, 0, 1, 0])

    def test_basic_index_gradient(self):
        x = Tensor(rng().normal(size=(3, 4, 5)))
        assert finite_diff_check(lambda t: (t[:, 1] * t[:, 2]).sum(), x).passed

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "exp"])
    def test_unary(self, op):
        x = Tensor(rng(1).normal(size=(4, 3)))
        assert finite_diff_check(lambda t: getattr(t, op)().sum() * 1.5, x).passed

    def test_log_and_division(self):
        x = Tensor(rng(2).uniform(0.5, 2.0, size=6))
        assert finite_diff_check(lambda t: (t.log() / t).sum(), x).passed

    def test_matmul(self):
        r = rng(3)
        a, b = Tensor(r.normal(size=(2, 3, 4))), Tensor(r.normal(size=(4, 5)))
        assert finite_diff_check(lambda t: ((t @ b) * (t @ b)).sum(), a).passed
        assert finite_diff_check(lambda t: ((a @ t) * (a @ t)).sum(), b).passed

    def test_stack_concat_transpose(self):
        r = rng(4)
        a, b = Tensor(r.normal(size=(2, 3))), Tensor(r.normal(size=(2, 3)))
        f = lambda t: (T.stack([t, b], axis=1) * T.concat([t, b], axis=0).reshape(2, 2, 3)).sum()
        assert finite_diff_check(f, a).passed
        assert finite_diff_check(lambda t: (t.transpose(1, 0) @ t).sum(), a).passed

    def test_max_pool_gradient(self):
        x = Tensor(rng(5).normal(size=(1, 2, 4, 4)))
        assert finite_diff_check(lambda t: (max_pool2d(t, 2) * max_pool2d(t, 2)).sum(), x).passed

    def test_sabotaged_rule_is_caught(self, monkeypatch):
        monkeypatch.setattr(T.Tanh, "backward", staticmethod(lambda ctx, g: g))
        x = Tensor(rng(6).normal(size=5))
        assert not finite_diff_check(lambda t: t.tanh().sum(), x).passed


class TestAnomaly:
    def test_detect_anomaly_raises(self):
        with detect_anomaly(), pytest.raises(FloatingPointError):
            Tensor(np.array([-1.0])).log()

    def test_finite_diff_reports_non_finite(self):
        rep = finite_diff_check(lambda t: t.log().sum(), Tensor(np.array([-1.0, 1.0])))
        assert rep.non_finite and not rep.passed


class TestSerialization:
    def test_round_trip(self, tmp_path):
        x = rng().normal(size=(2, 3, 4))
        save_tensor(Tensor(x), tmp_path / "x.stnt")
        np.testing.assert_array_equal(load_tensor(tmp_path / "x.stnt").data, x)

    def test_scalar_and_empty(self):
        for arr in (np.array(3.5), np.zeros((0, 4))):
            back = tensor_from_bytes(tensor_to_bytes(arr)).data
            assert back.shape == arr.shape
            np.testing.assert_array_equal(back, arr)

    def test_header_layout(self):
        blob = tensor_to_bytes(np.ones((2, 3)))
        assert blob[:4] == b"STNT" and len(blob) == 4 + 4 + 4 + 2 * 8 + 6 * 8

    def test_corrupt_blobs_rejected(self):
        blob = tensor_to_bytes(np.ones(4))
        with pytest.raises(ValueError):
            tensor_from_bytes(b"XXXX" + blob[4:])
        with pytest.raises(ValueError):
            tensor_from_bytes(blob[:-3])
