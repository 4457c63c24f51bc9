"""Truncated-BPTT training with Adam, global-norm clipping, plateau LR decay and curricula."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convlstm import StateStore, bidirectional_fuse
from .data import (
    AugmentConfig,
    EVAL_CROP,
    SequenceBatch,
    SequenceDataset,
    center_view,
    make_batch,
    multicrop_predict,
    predict_proba,
    shuffle_frames,
)
from .objectives import batch_ctc_loss, sequence_cross_entropy
from .tensor import Tensor, load_tensor, no_grad, save_tensor, softmax_np

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Training configuration is inconsistent with the data."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the update was skipped."""


@dataclass
class TbpttConfig:
    window: int = 8
    per_timestep_loss: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"TBPTT window must be >= 1, got {self.window}")


class Adam:
    """Adam with bias correction; gradients are clipped to ``clip`` global norm first."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 5.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip = clip
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.step_count = 0

    def step(self):
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.params]
        return adam_step(self, self.params, grads)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "step_count": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict):
        self.lr = float(state["lr"])
        self.step_count = int(state["step_count"])
        self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


OptimizerState = Adam


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_by_global_norm(grads, max_norm: float):
    """Scale all gradients by ``max_norm / norm`` when the norm exceeds ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def adam_step(opt: Adam, params, grads) -> float:
    """One Adam update; returns the pre-clip gradient norm."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NonFiniteGradientError("non-finite gradient; update skipped")
    grads, norm = clip_by_global_norm(grads, opt.clip)
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        opt.m[i] = b1 * opt.m[i] + (1 - b1) * g
        opt.v[i] = b2 * opt.v[i] + (1 - b2) * g * g
        m_hat = opt.m[i] / (1 - b1 ** t)
        v_hat = opt.v[i] / (1 - b2 ** t)
        p.data = p.data - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return norm


def tbptt_gradients(model, batch: SequenceBatch, cfg: TbpttConfig, seed=0, boundary=None) -> dict:
    """Accumulate truncated-BPTT gradients for one batch into the parameters' ``.grad``.

    States carry over between windows with their gradient history cut.  Each
    window's loss is normalized by the full sequence length so the window
    losses sum to the sequence loss.  ``boundary(store)`` replaces the cut
    between windows (used by the masked full-BPTT reference).
    """
    frames = batch.frames
    b, t_len = frames.shape[:2]
    if cfg.window > t_len:
        raise ConfigError(f"TBPTT window {cfg.window} exceeds sequence length {t_len}")
    model.train()
    store = StateStore(rng=np.random.default_rng(seed))
    n_windows = math.ceil(t_len / cfg.window)
    total, passes, outputs = 0.0, 0, []
    pending = None
    for w in range(n_windows):
        lo, hi = w * cfg.window, min(t_len, (w + 1) * cfg.window)
        out = model(Tensor(frames[:, lo:hi]), store)
        outputs.append(out.data)
        if cfg.per_timestep_loss:
            loss = sequence_cross_entropy(out, batch.labels, weight=1.0 / (b * t_len))
        elif hi == t_len:
            loss = sequence_cross_entropy(out[:, -1:], batch.labels)
        else:
            loss = None
        if loss is not None:
            total += loss.item()
            if boundary is None:
                loss.backward()
                passes += 1
            else:
                pending = loss if pending is None else pending + loss
        if boundary is None:
            store.detach()
        else:
            boundary(store)
    if pending is not None:
        pending.backward()
        passes += 1
    return {"loss": total, "windows": n_windows, "backward_passes": passes,
            "outputs": np.concatenate(outputs, axis=1)}


def train_sequence_tbptt(model, batch: SequenceBatch, cfg: TbpttConfig, opt: Adam,
                         seed=0) -> dict:
    """Truncated-BPTT gradients over the whole sequence followed by one update."""
    model.zero_grad()
    metrics = tbptt_gradients(model, batch, cfg, seed)
    metrics.pop("outputs")
    metrics["grad_norm"] = opt.step()
    metrics["updates"] = 1
    model.zero_grad()
    return metrics


def train_sequence_ctc(model, batch: SequenceBatch, opt: Adam, seed=0) -> dict:
    """Full-sequence backprop of the CTC loss (no truncation)."""
    model.train()
    model.zero_grad()
    store = StateStore(rng=np.random.default_rng(seed))
    out = model(Tensor(batch.frames), store)
    loss = batch_ctc_loss(out, batch.labels)
    loss.backward()
    norm = opt.step()
    model.zero_grad()
    return {"loss": loss.item(), "windows": 1, "backward_passes": 1, "updates": 1, "grad_norm": norm}


class PlateauScheduler:
    """Halve the learning rate after ``patience`` evaluations without improvement."""

    def __init__(self, opt: Adam, patience: int = 3, factor: float = 0.5, floor: float = 1e-6):
        self.opt, self.patience, self.factor, self.floor = opt, patience, factor, floor
        self.best = -math.inf
        self.bad = 0
        self.evaluations = 0

    def update(self, metric: float) -> bool:
        """Record one validation metric (higher is better); True when LR was cut."""
        self.evaluations += 1
        if metric > self.best:
            self.best, self.bad = metric, 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            new = max(self.floor, self.opt.lr * self.factor)
            cut = new < self.opt.lr
            self.opt.lr = new
            return cut
        return False

    def state_dict(self) -> dict:
        return {"best": self.best, "bad": self.bad, "evaluations": self.evaluations}

    def load_state_dict(self, state: dict):
        self.best = float(state["best"])
        self.bad = int(state["bad"])
        self.evaluations = int(state["evaluations"])


@dataclass
class CurriculumSchedule:
    """Ordered ``(start_step, sequence_length)`` phases."""

    phases: list = field(default_factory=lambda: [(0, 24)])

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("curriculum needs at least one phase")
        starts = [s for s, _ in self.phases]
        lengths = [n for _, n in self.phases]
        if starts[0] != 0 or starts != sorted(starts):
            raise ConfigError("curriculum phases must start at step 0 and be ordered")
        if lengths != sorted(lengths):
            raise ConfigError("curriculum lengths must be non-decreasing")

    @classmethod
    def word_task(cls, switch_step: int) -> "CurriculumSchedule":
        return cls([(0, 24), (switch_step, 29)])

    @classmethod
    def parse(cls, text: str) -> "CurriculumSchedule":
        """``"0:24, 500:29"`` -> phases."""
        phases = []
        for item in text.replace(";", ",").split(","):
            if item.strip():
                start, length = item.split(":")
                phases.append((int(start), int(length)))
        return cls(phases)

    def phase_at(self, step: int) -> int:
        idx = 0
        for i, (start, _) in enumerate(self.phases):
            if step >= start:
                idx = i
        return idx

    def length_at(self, step: int) -> int:
        return self.phases[self.phase_at(step)][1]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def topk_accuracy(probs: np.ndarray, labels, ks=(1, 5, 10)) -> dict:
    labels = np.asarray(labels)
    order = np.argsort(-probs, axis=1, kind="stable")
    result = {}
    for k in ks:
        hits = (order[:, :min(k, probs.shape[1])] == labels[:, None]).any(axis=1)
        result[f"top{k}"] = float(hits.mean()) if len(labels) else 0.0
    return result


def dataset_probabilities(model, dataset: SequenceDataset, crop: int = EVAL_CROP, multicrop: bool = False,
                          reverse_model=None, shuffle_seed=None, policy=None,
                          length: int | None = None) -> np.ndarray:
    """Class probabilities per sequence, optionally multi-crop and/or bidirectional."""
    seqs = [s if length is None else s[:length] for s in dataset.sequences]
    if shuffle_seed is not None:
        seqs = [shuffle_frames(s, [shuffle_seed, i]) for i, s in enumerate(seqs)]
    if multicrop:
        fwd = np.stack([multicrop_predict(model, s) for s in seqs])
        if reverse_model is None:
            return fwd
        rev = np.stack([multicrop_predict(reverse_model, s[::-1]) for s in seqs])
        return 0.5 * (fwd + rev)
    views = np.stack([center_view(s, crop) for s in seqs])
    if reverse_model is None:
        return predict_proba(model, views, policy=policy)
    out = []
    for i in range(0, len(views), 32):
        chunk = views[i:i + 32]
        with no_grad():
            model.eval(), reverse_model.eval()
            f = model(Tensor(chunk), StateStore())
            r = reverse_model(Tensor(chunk[:, ::-1].copy()), StateStore())
        out.append(bidirectional_fuse(f, r))
    return np.concatenate(out)


def evaluate(model, dataset: SequenceDataset, **kwargs) -> dict:
    if len(dataset) == 0:
        return {"top1": 0.0, "top5": 0.0, "top10": 0.0, "n": 0}
    probs = dataset_probabilities(model, dataset, **kwargs)
    result = topk_accuracy(probs, dataset.labels)
    result["n"] = len(dataset)
    return result


# ---------------------------------------------------------------------------
# trainer and curriculum loop
# ---------------------------------------------------------------------------

@dataclass
class TrainSettings:
    batch_size: int = 8
    lr: float = 1e-3
    clip: float | None = 5.0
    window: int = 8
    patience: int = 3
    lr_floor: float = 1e-6
    eval_every: int = 25
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    task: str = "word"
    shuffle_frames: bool = False
    direction: str = "forward"


class Trainer:
    def __init__(self, model, settings: TrainSettings, seed: int):
        self.model = model
        self.settings = settings
        self.seed = seed
        self.opt = Adam(model.parameters(), lr=settings.lr, clip=settings.clip)
        self.scheduler = PlateauScheduler(self.opt, settings.patience, floor=settings.lr_floor)
        self.tbptt = TbpttConfig(settings.window)
        self.step = 0
        self.updates = 0
        self.sequences = 0

    def batch_for_step(self, dataset: SequenceDataset, length: int) -> SequenceBatch:
        rng = np.random.default_rng([self.seed, self.step])
        size = min(self.settings.batch_size, len(dataset))
        idx = rng.choice(len(dataset), size=size, replace=False)
        return make_batch(dataset, idx, rng, length=length, augment=self.settings.augment,
                          shuffle=self.settings.shuffle_frames,
                          reverse=self.settings.direction == "reverse")

    def train_step(self, dataset: SequenceDataset, length: int) -> dict:
        batch = self.batch_for_step(dataset, length)
        seed = [self.seed, self.step, 1]
        if self.settings.task == "ctc":
            metrics = train_sequence_ctc(self.model, batch, self.opt, seed)
        else:
            metrics = train_sequence_tbptt(self.model, batch, TbpttConfig(min(self.tbptt.window, length)),
                                           self.opt, seed)
        self.step += 1
        self.updates += metrics["updates"]
        self.sequences += 1
        return metrics

    def validate(self, dataset: SequenceDataset) -> float:
        kwargs = {}
        if self.settings.shuffle_frames:
            kwargs["shuffle_seed"] = self.seed
        if self.settings.direction == "reverse":
            dataset = SequenceDataset([s[::-1] for s in dataset.sequences], dataset.labels, dataset.metadata)
        return evaluate(self.model, dataset, **kwargs)["top1"]

    def state(self) -> dict:
        return {"step": self.step, "lr": self.opt.lr, "updates": self.updates, "sequences": self.sequences,
                "scheduler": self.scheduler.state_dict()}


def run_curriculum(trainer: Trainer, schedule: CurriculumSchedule, dataset: SequenceDataset,
                   total_steps: int, val_dataset: SequenceDataset | None = None,
                   on_step=None) -> list:
    """Train until ``total_steps``; returns one log row per step.

    ``on_step(row)`` is called after each step (used for streaming CSV rows and
    checkpoints); returning ``False`` from it stops training early.
    """
    longest = min(s.shape[0] for s in dataset.sequences)
    for _, length in schedule.phases:
        if length > longest:
            raise ConfigError(f"curriculum length {length} exceeds available {longest} frames")
    rows = []
    while trainer.step < total_steps:
        phase = schedule.phase_at(trainer.step)
        length = schedule.phases[phase][1]
        metrics = trainer.train_step(dataset, length)
        if not math.isfinite(metrics["loss"]):
            raise NonFiniteGradientError(f"non-finite loss at step {trainer.step}")
        row = {"step": trainer.step, "loss": metrics["loss"], "val_accuracy": None,
               "lr": trainer.opt.lr, "phase": phase, "length": length}
        if val_dataset is not None and trainer.settings.eval_every and trainer.step % trainer.settings.eval_every == 0:
            acc = trainer.validate(val_dataset)
            row["val_accuracy"] = acc
            if trainer.scheduler.update(acc):
                log.info("step %d: validation plateau, lr -> %g", trainer.step, trainer.opt.lr)
            row["lr"] = trainer.opt.lr
        rows.append(row)
        if on_step is not None and on_step(row) is False:
            break
    return rows


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, trainer: Trainer | None = None, extra: dict | None = None):
    """Directory with ``manifest.json`` plus one tensor blob per array."""
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    names = {}
    for i, (name, value) in enumerate(model.state_dict().items()):
        fname = f"model_{i:04d}.stnt"
        save_tensor(value, root / "tensors" / fname)
        names[name] = fname
    manifest = {"version": CHECKPOINT_VERSION, "spec_hash": model.spec.hash(), "spec": model.spec.to_text(),
                "tensors": names}
    if trainer is not None:
        opt_files = {"m": [], "v": []}
        for key in ("m", "v"):
            for i, arr in enumerate(getattr(trainer.opt, key)):
                fname = f"adam_{key}_{i:04d}.stnt"
                save_tensor(arr, root / "tensors" / fname)
                opt_files[key].append(fname)
        manifest.update(trainer.state())
        manifest["adam_step"] = trainer.opt.step_count
        manifest["adam"] = opt_files
        manifest["seed"] = trainer.seed
    manifest.update(extra or {})
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(root / "manifest.json")


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    return json.loads(mpath.read_text())


def load_checkpoint(path, model, trainer: Trainer | None = None, check_spec: bool = True) -> dict:
    root = Path(path)
    manifest = read_manifest(root)
    if check_spec and manifest["spec_hash"] != model.spec.hash():
        raise ConfigError(f"checkpoint {root} was written for a different architecture spec")
    state = {name: load_tensor(root / "tensors" / fname).data for name, fname in manifest["tensors"].items()}
    model.load_state_dict(state)
    if trainer is not None and "adam" in manifest:
        trainer.opt.load_state_dict({
            "lr": manifest["lr"], "step_count": manifest["adam_step"],
            "m": [load_tensor(root / "tensors" / f).data for f in manifest["adam"]["m"]],
            "v": [load_tensor(root / "tensors" / f).data for f in manifest["adam"]["v"]],
        })
        trainer.scheduler.load_state_dict(manifest["scheduler"])
        trainer.step = int(manifest["step"])
        trainer.updates = int(manifest["updates"])
        trainer.sequences = int(manifest["sequences"])
    return manifest


def init_reverse_from_forward(reverse_model, forward_checkpoint) -> dict:
    """Start the reverse-direction network from the trained forward weights."""
    return load_checkpoint(forward_checkpoint, reverse_model)
