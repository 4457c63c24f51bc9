"""State-reset sensitivity probe: zero one scale's recurrent state every T frames."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convlstm import ResetPolicy, check_policy
from .data import EVAL_CROP, SequenceDataset, center_view, predict_proba

DEFAULT_SCALES = ("s/2", "s/4", "s/8", "s/16", "final-lstm")
DEFAULT_PERIODS = (1, 3, 5, 10, 15)
CSV_HEADER = ("scale", "T", "accuracy", "drop_points")


@dataclass
class ProbeConfig:
    scales: tuple = DEFAULT_SCALES
    periods: tuple = DEFAULT_PERIODS
    eval_size: int | None = None  # None: the whole eval set
    seed: int = 0
    crop: int = EVAL_CROP
    baseline: float | None = None  # supplied baseline accuracy; measured when None

    def __post_init__(self):
        self.scales = tuple(self.scales)
        self.periods = tuple(int(p) for p in self.periods)
        if not self.scales:
            raise ValueError("probe needs at least one scale")
        for scale in self.scales:
            ResetPolicy.parse(scale, 1)  # rejects unknown tags early
        if any(p < 1 for p in self.periods):
            raise ValueError(f"probe periods must be >= 1, got {self.periods}")


@dataclass
class ProbeReport:
    baseline: float
    cells: dict = field(default_factory=dict)  # (scale, T) -> accuracy
    metadata: dict = field(default_factory=dict)

    def accuracy(self, scale: str, period: int) -> float:
        return self.cells[(scale, period)]

    def drop(self, scale: str, period: int) -> float:
        """Accuracy lost in percentage points."""
        return 100.0 * (self.baseline - self.cells[(scale, period)])

    def rows(self) -> list:
        scales = list(dict.fromkeys(s for s, _ in self.cells))
        periods = sorted({t for _, t in self.cells})
        return [(s, t, self.cells[(s, t)], self.drop(s, t))
                for s in scales for t in periods if (s, t) in self.cells]


def parameter_hash(model) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, value in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()


def _accuracy(model, views: np.ndarray, labels, policy) -> float:
    probs = predict_proba(model, views, policy=policy)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def run_probe(model, dataset: SequenceDataset, cfg: ProbeConfig) -> ProbeReport:
    indices = np.arange(len(dataset))
    if cfg.eval_size is not None and cfg.eval_size < len(dataset):
        rng = np.random.default_rng([cfg.seed, 9])
        indices = np.sort(rng.choice(len(dataset), size=cfg.eval_size, replace=False))
    subset = dataset.subset(indices)
    views = np.stack([center_view(s, cfg.crop) for s in subset.sequences])
    # surface unmatched scales before spending time on evaluation
    for scale in cfg.scales:
        check_policy([model], ResetPolicy.parse(scale, 1))

    before = parameter_hash(model)
    baseline = cfg.baseline if cfg.baseline is not None else _accuracy(model, views, subset.labels, None)
    report = ProbeReport(baseline)
    for scale in cfg.scales:
        for period in cfg.periods:
            policy = ResetPolicy.parse(scale, period)
            report.cells[(scale, period)] = _accuracy(model, views, subset.labels, policy)
    after = parameter_hash(model)
    if before != after:
        raise RuntimeError("model parameters changed during probing")
    report.metadata = {"model_hash": before, "dataset_hash": subset.fingerprint(), "seed": cfg.seed,
                       "n": len(subset), "sequence_length": int(views.shape[1])}
    return report


def emit_probe_plot_data(report: ProbeReport, path) -> Path:
    """CSV with one row per (scale, T), scale outer and T inner."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for scale, period, acc, drop in report.rows():
            writer.writerow([scale, period, repr(float(acc)), repr(float(drop))])
    return path


def read_probe_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return [{"scale": r["scale"], "T": int(r["T"]), "accuracy": float(r["accuracy"]),
                 "drop_points": float(r["drop_points"])} for r in csv.DictReader(fh)]


def plot_probe(report: ProbeReport, path) -> Path:
    """Drop in accuracy against reset period, one line per scale."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    by_scale: dict = {}
    for scale, period, _, drop in report.rows():
        by_scale.setdefault(scale, []).append((period, drop))
    for scale, pts in by_scale.items():
        ax.plot([p for p, _ in pts], [d for _, d in pts], marker="o", label=scale)
    ax.set_xlabel("reset period T (frames)")
    ax.set_ylabel("accuracy drop (points)")
    ax.set_title(f"state-reset probe, baseline {100 * report.baseline:.1f}%")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
