import csv
import json

import pytest

from deepconvlstm import verify
from deepconvlstm.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_VERIFY, main
from deepconvlstm.config import RunConfig, default_config_path, load_parser
from deepconvlstm.training import ConfigError, Trainer

TOY = str(default_config_path().parent / "toy.cfg")


def run(*argv):
    return main([str(a) for a in argv])


def metrics(out):
    with (out / "metrics.csv").open() as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert run("train", "--config", TOY, "--out", out, "--deterministic") == EXIT_OK
    return out


class TestTrain:
    def test_outputs(self, toy_run):
        rows = metrics(toy_run)
        assert len(rows) == 20
        assert float(rows[-1]["loss"]) < float(rows[0]["loss"])
        assert rows[9]["val_accuracy"] != "" and rows[8]["val_accuracy"] == ""
        for name in ("training_curve.png", "train_summary.json", "train.cfg", "checkpoint/manifest.json"):
            assert (toy_run / name).is_file()
        summary = json.loads((toy_run / "train_summary.json").read_text())
        assert summary["steps"] == 20 and summary["parameters"] <= 200_000

    def test_rerun_identical(self, toy_run, tmp_path):
        assert run("train", "--config", TOY, "--out", tmp_path, "--deterministic") == EXIT_OK
        assert (tmp_path / "metrics.csv").read_bytes() == (toy_run / "metrics.csv").read_bytes()

    def test_resume_bit_exact(self, toy_run, tmp_path):
        assert run("train", "--config", TOY, "--out", tmp_path, "--steps", 10, "--deterministic") == EXIT_OK
        assert run("train", "--config", TOY, "--out", tmp_path, "--resume", "--deterministic") == EXIT_OK
        assert (tmp_path / "metrics.csv").read_bytes() == (toy_run / "metrics.csv").read_bytes()
        for blob in sorted((toy_run / "checkpoint" / "tensors").iterdir()):
            assert (tmp_path / "checkpoint" / "tensors" / blob.name).read_bytes() == blob.read_bytes()

    def test_resume_without_checkpoint(self, tmp_path):
        assert run("train", "--config", TOY, "--out", tmp_path, "--resume") == EXIT_CONFIG

    def test_window_longer_than_curriculum(self, tmp_path):
        code = run("train", "--config", TOY, "--out", tmp_path, "--set", "data.n_frames=6",
                   "--set", "train.curriculum=0:8")
        assert code == EXIT_CONFIG

    def test_non_finite_loss_aborts(self, tmp_path, monkeypatch):
        original = Trainer.train_step

        def poisoned(self, dataset, length):
            out = original(self, dataset, length)
            if self.step == 4:
                out["loss"] = float("nan")
            return out

        monkeypatch.setattr(Trainer, "train_step", poisoned)
        code = run("train", "--config", TOY, "--out", tmp_path, "--steps", 6, "--set", "train.checkpoint_every=2")
        assert code == EXIT_RUNTIME
        assert json.loads((tmp_path / "abort.json").read_text())["step"] == 4
        assert json.loads((tmp_path / "checkpoint" / "manifest.json").read_text())["step"] == 2


class TestEvalProbe:
    def test_eval(self, toy_run):
        assert run("eval", "--config", TOY, "--out", toy_run) == EXIT_OK
        result = json.loads((toy_run / "eval.json").read_text())
        assert 0.0 <= result["top1"] <= 1.0 and result["n"] == 16 and not result["multicrop"]

    def test_multicrop_eval(self, toy_run, tmp_path):
        code = run("eval", "--config", TOY, "--out", tmp_path, "--checkpoint", toy_run / "checkpoint", "--multicrop")
        assert code == EXIT_OK
        assert json.loads((tmp_path / "eval.json").read_text())["multicrop"]

    def test_probe(self, toy_run, tmp_path):
        code = run("probe", "--config", TOY, "--out", tmp_path, "--checkpoint", toy_run / "checkpoint",
                   "--scales", "s/8,s/16", "--periods", "1,4,8")
        assert code == EXIT_OK
        with (tmp_path / "probe.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["scale"], int(r["T"])) for r in rows] == [
            ("s/8", 1), ("s/8", 4), ("s/8", 8), ("s/16", 1), ("s/16", 4), ("s/16", 8)]
        assert float(rows[2]["drop_points"]) == 0.0
        assert (tmp_path / "probe.png").is_file()

    def test_probe_unknown_scale(self, toy_run, tmp_path):
        code = run("probe", "--config", TOY, "--out", tmp_path, "--checkpoint", toy_run / "checkpoint",
                   "--scales", "s/32")
        assert code == EXIT_CONFIG

    def test_spec_mismatch(self, toy_run, tmp_path):
        code = run("eval", "--config", TOY, "--out", tmp_path, "--checkpoint", toy_run / "checkpoint",
                   "--set", "data.n_classes=4", "--set", "data.speeds=1,2")
        assert code == EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        assert run("eval", "--config", TOY, "--out", tmp_path) == EXIT_CONFIG


class TestVerifyAndData:
    def test_verify_census(self, tmp_path):
        assert run("verify", "--out", tmp_path, "--suite", "census", "--suite", "tbptt") == EXIT_OK
        report = json.loads((tmp_path / "verify.json").read_text())
        assert set(report["suites"]) == {"census", "tbptt"}

    def test_verify_failure_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setitem(verify.SUITES, "census", lambda: {"passed": False, "seconds": 0.0})
        assert run("verify", "--out", tmp_path, "--suite", "census") == EXIT_VERIFY

    def test_gen_data_and_train_from_frames(self, tmp_path):
        data_out = tmp_path / "gen"
        assert run("gen-data", "--config", TOY, "--out", data_out) == EXIT_OK
        for split in ("train", "val", "test"):
            assert (data_out / "data" / split / "manifest.tsv").is_file()
        code = run("train", "--config", TOY, "--out", tmp_path / "run", "--steps", 2,
                   "--set", f"data.source={data_out / 'data'}")
        assert code == EXIT_OK


class TestConfig:
    def test_missing_file(self, tmp_path):
        assert run("train", "--config", tmp_path / "nope.cfg", "--out", tmp_path) == EXIT_CONFIG

    def test_bad_override(self, tmp_path):
        assert run("train", "--config", TOY, "--out", tmp_path, "--set", "nonsense") == EXIT_CONFIG

    def test_missing_arch_file(self, tmp_path):
        code = run("train", "--config", TOY, "--out", tmp_path, "--set", f"run.arch={tmp_path / 'x.cfg'}")
        assert code == EXIT_CONFIG

    def test_include_cycle(self, tmp_path):
        (tmp_path / "a.cfg").write_text("[run]\ninclude = b.cfg\n")
        (tmp_path / "b.cfg").write_text("[run]\ninclude = a.cfg\n")
        with pytest.raises(ConfigError):
            load_parser(tmp_path / "a.cfg")

    def test_include_and_override_precedence(self, tmp_path):
        (tmp_path / "child.cfg").write_text(f"[run]\ninclude = {TOY}\nseed = 5\n[train]\nsteps = 7\n")
        cfg = RunConfig.from_parser(load_parser(tmp_path / "child.cfg", {"train.steps": 9}))
        assert cfg.seed == 5 and cfg.steps == 9 and cfg.synthetic.n_frames == 8

    def test_dumped_config_reloads(self, toy_run):
        cfg = RunConfig.from_parser(load_parser(toy_run / "train.cfg"))
        assert cfg.steps == 20
