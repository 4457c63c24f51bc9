import math

import numpy as np
import pytest

from deepconvlstm.objectives import (
    CTCInfeasibleError,
    batch_ctc_loss,
    collapse,
    ctc_loss,
    ctc_min_frames,
    ctc_oracle,
    encode_text,
    greedy_decode,
    sequence_cross_entropy,
    sequence_cross_entropy_oracle,
)
from deepconvlstm.tensor import ShapeError, Tensor, finite_diff_check


def rng(seed=0):
    return np.random.default_rng(seed)


class TestCrossEntropy:
    def test_matches_loop_oracle(self):
        x = rng().normal(size=(3, 4, 6)) * 4
        y = [0, 5, 2]
        got = sequence_cross_entropy(Tensor(x), y).item()
        assert got == pytest.approx(sequence_cross_entropy_oracle(x, y), abs=1e-12)

    def test_uniform_logits(self):
        assert sequence_cross_entropy(Tensor(np.zeros((2, 3, 7))), [1, 4]).item() == pytest.approx(math.log(7))

    def test_confident_correct_is_near_zero(self):
        x = np.zeros((1, 2, 3))
        x[..., 2] = 50.0
        assert sequence_cross_entropy(Tensor(x), [2]).item() < 1e-20

    def test_weight_replaces_normalizer(self):
        x = rng(1).normal(size=(2, 3, 4))
        mean = sequence_cross_entropy(Tensor(x), [0, 1]).item()
        assert sequence_cross_entropy(Tensor(x), [0, 1], weight=1.0).item() == pytest.approx(6 * mean)

    def test_gradient(self):
        x = Tensor(rng(2).normal(size=(2, 3, 5)))
        assert finite_diff_check(lambda t: sequence_cross_entropy(t, [4, 0]), x).passed

    def test_errors(self):
        with pytest.raises(ShapeError):
            sequence_cross_entropy(Tensor(np.zeros((2, 3, 4))), [0])
        with pytest.raises(ValueError):
            sequence_cross_entropy(Tensor(np.zeros((1, 3, 4))), [4])


class TestCtc:
    def test_matches_enumeration(self):
        r = rng(3)
        for target in ([1], [1, 2], [2, 2], [1, 2, 1], [3, 3, 3]):
            for t_len in range(ctc_min_frames(target), 7):
                x = r.normal(size=(t_len, 4)) * 2
                assert ctc_loss(Tensor(x), target).item() == pytest.approx(ctc_oracle(x, target), abs=1e-9)

    def test_empty_target(self):
        x = rng(4).normal(size=(4, 3))
        assert ctc_loss(Tensor(x), []).item() == pytest.approx(ctc_oracle(x, []), abs=1e-12)

    def test_single_path_certainty(self):
        x = np.full((3, 3), -40.0)
        x[[0, 1, 2], [1, 0, 1]] = 40.0  # path a, blank, a
        assert ctc_loss(Tensor(x), [1, 1]).item() < 1e-20

    def test_uniform_closed_form(self):
        # T=2, K=2, target [1]: paths (1,1), (0,1), (1,0) out of four
        assert ctc_loss(Tensor(np.zeros((2, 2))), [1]).item() == pytest.approx(-math.log(0.75))

    @pytest.mark.parametrize("target", [[1, 2, 2], [2], []])
    def test_gradient(self, target):
        x = Tensor(rng(5).normal(size=(6, 3)))
        assert finite_diff_check(lambda t: ctc_loss(t, target), x).passed

    def test_repeated_labels_need_blank(self):
        assert ctc_min_frames([1, 1, 2]) == 4
        with pytest.raises(CTCInfeasibleError):
            ctc_loss(Tensor(np.zeros((3, 3))), [1, 1, 2])
        assert ctc_oracle(np.zeros((3, 3)), [1, 1, 2]) == math.inf

    def test_invalid_labels(self):
        with pytest.raises(ValueError):
            ctc_loss(Tensor(np.zeros((3, 3))), [0])
        with pytest.raises(ValueError):
            ctc_loss(Tensor(np.zeros((3, 3))), [3])
        with pytest.raises(ShapeError):
            ctc_loss(Tensor(np.zeros((1, 3, 3))), [1])

    def test_batch_mean(self):
        x = rng(6).normal(size=(2, 5, 4))
        want = 0.5 * (ctc_oracle(x[0], [1, 2]) + ctc_oracle(x[1], [3]))
        assert batch_ctc_loss(Tensor(x), [[1, 2], [3]]).item() == pytest.approx(want, abs=1e-9)

    def test_oracle_refuses_long_input(self):
        with pytest.raises(ValueError):
            ctc_oracle(np.zeros((9, 2)), [1])


class TestText:
    def test_encode(self):
        assert encode_text("ab a") == [1, 2, 28, 1]
        with pytest.raises(ValueError):
            encode_text("A")

    def test_collapse_and_decode(self):
        assert collapse([0, 1, 1, 0, 1, 2, 2]) == (1, 1, 2)
        x = np.full((5, 4), -5.0)
        x[np.arange(5), [3, 3, 0, 3, 1]] = 5.0
        assert greedy_decode(x) == (3, 3, 1)
