import numpy as np
import pytest

from deepconvlstm.arch import build_model, reduced_spec
from deepconvlstm.convlstm import NoMatchError, ResetPolicy
from deepconvlstm.data import SyntheticTaskSpec, center_view, generate_synthetic_dataset, predict_proba
from deepconvlstm.probe import (
    CSV_HEADER,
    ProbeConfig,
    ProbeReport,
    emit_probe_plot_data,
    parameter_hash,
    plot_probe,
    read_probe_csv,
    run_probe,
)

N_FRAMES = 5


@pytest.fixture(scope="module")
def model():
    return build_model(reduced_spec(2), seed=4)


@pytest.fixture(scope="module")
def dataset():
    spec = SyntheticTaskSpec(n_frames=N_FRAMES, n_train=4, n_test=10)
    return generate_synthetic_dataset(spec, 3, "test")


@pytest.fixture(scope="module")
def report(model, dataset):
    return run_probe(model, dataset, ProbeConfig(scales=("s/4", "s/8"), periods=(1, 2, 3, 5, 15)))


class TestReport:
    def test_grid_order(self, report):
        rows = report.rows()
        assert len(rows) == 10
        assert [(s, t) for s, t, _, _ in rows[:5]] == [("s/4", p) for p in (1, 2, 3, 5, 15)]

    def test_drop_is_points(self):
        r = ProbeReport(0.75, {("s/8", 1): 0.5})
        assert r.drop("s/8", 1) == 25.0

    def test_metadata(self, report, model, dataset):
        assert report.metadata["model_hash"] == parameter_hash(model)
        assert report.metadata["dataset_hash"] == dataset.fingerprint()
        assert report.metadata["n"] == 10 and report.metadata["sequence_length"] == N_FRAMES

    def test_long_period_reproduces_baseline(self, report):
        for scale in ("s/4", "s/8"):
            assert report.accuracy(scale, 5) == report.baseline
            assert report.accuracy(scale, 15) == report.baseline

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProbeConfig(periods=(0,))
        with pytest.raises(ValueError):
            ProbeConfig(scales=())


class TestSemantics:
    def test_long_period_probabilities_bit_exact(self, model, dataset):
        views = np.stack([center_view(s) for s in dataset.sequences])
        base = predict_proba(model, views)
        late = predict_proba(model, views, policy=ResetPolicy.parse("s/8", N_FRAMES))
        np.testing.assert_array_equal(base, late)

    def test_reset_all_every_frame_is_stateless(self, model, dataset):
        views = np.stack([center_view(s) for s in dataset.sequences])
        reset = predict_proba(model, views, policy=ResetPolicy.parse("all", 1))
        last_frame_only = predict_proba(model, views[:, -1:])
        np.testing.assert_array_equal(reset, last_frame_only)

    def test_parameters_untouched(self, model, dataset):
        before = parameter_hash(model)
        run_probe(model, dataset, ProbeConfig(scales=("s/2",), periods=(1,)))
        assert parameter_hash(model) == before

    def test_unknown_scale(self):
        with pytest.raises(ValueError):
            ProbeConfig(scales=("s/32",), periods=(1,))

    def test_scale_absent_from_model(self, dataset):
        from deepconvlstm.verify import toy_recurrent_model
        with pytest.raises(NoMatchError):
            run_probe(toy_recurrent_model(classes=2), dataset, ProbeConfig(scales=("s/16",), periods=(1,)))

    def test_eval_subset_is_seeded(self, model, dataset):
        cfg = ProbeConfig(scales=("s/8",), periods=(1,), eval_size=4, seed=2)
        a, b = run_probe(model, dataset, cfg), run_probe(model, dataset, cfg)
        assert a.metadata["n"] == 4 and a.metadata["dataset_hash"] == b.metadata["dataset_hash"]

    def test_supplied_baseline(self, model, dataset):
        r = run_probe(model, dataset, ProbeConfig(scales=("s/8",), periods=(1,), baseline=1.0))
        assert r.baseline == 1.0


class TestOutputs:
    def test_csv_round_trip(self, report, tmp_path):
        path = emit_probe_plot_data(report, tmp_path / "a.csv")
        assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
        rows = read_probe_csv(path)
        assert len(rows) == 10
        for row in rows:
            assert row["accuracy"] == report.accuracy(row["scale"], row["T"])
            assert row["drop_points"] == 100.0 * (report.baseline - row["accuracy"])

    def test_re_emit_byte_identical(self, report, tmp_path):
        a = emit_probe_plot_data(report, tmp_path / "a.csv").read_bytes()
        b = emit_probe_plot_data(report, tmp_path / "b.csv").read_bytes()
        assert a == b

    def test_plot(self, report, tmp_path):
        path = plot_probe(report, tmp_path / "probe.png")
        assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
