"""Sequence datasets: synthetic order-sensitive task, frame-directory ingestion,
temporally coherent augmentation and multi-crop inference."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .tensor import Tensor, no_grad, softmax_np

log = logging.getLogger(__name__)

MODEL_EXTENT = 48
EVAL_CROP = 56
MULTICROP_SIZES = (48, 56, 64)


@dataclass
class SequenceBatch:
    frames: np.ndarray  # [B, T, C, H, W], values in [0, 1]
    labels: list
    lengths: list

    @property
    def size(self) -> int:
        return self.frames.shape[0]


@dataclass
class SequenceDataset:
    """Immutable collection of ``[T, C, H, W]`` sequences with labels."""

    sequences: list
    labels: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequences)

    def subset(self, indices) -> "SequenceDataset":
        return SequenceDataset([self.sequences[i] for i in indices], [self.labels[i] for i in indices],
                               dict(self.metadata))

    def as_batch(self, indices=None) -> SequenceBatch:
        idx = range(len(self)) if indices is None else indices
        seqs = [self.sequences[i] for i in idx]
        frames = np.stack(seqs) if seqs else np.zeros((0, 0, 1, 0, 0))
        return SequenceBatch(frames, [self.labels[i] for i in idx], [s.shape[0] for s in seqs])

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for seq, label in zip(self.sequences, self.labels):
            h.update(np.ascontiguousarray(seq, dtype="<f8").tobytes())
            h.update(str(label).encode())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# geometric transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop_min: int = 48
    crop_max: int = 68
    flip_prob: float = 0.5
    max_rotation: float = 10.0
    brightness: float = 0.1
    jitter: bool = True
    out_size: int = MODEL_EXTENT

    @classmethod
    def fixed(cls, crop: int, out_size: int = MODEL_EXTENT) -> "AugmentConfig":
        """Deterministic center crop with no flip, rotation or brightness change."""
        return cls(crop, crop, 0.0, 0.0, 0.0, False, out_size)


@dataclass(frozen=True)
class AugmentParams:
    crop: float
    dx: float
    dy: float
    angle: float
    flip: bool
    brightness: float


def draw_params(cfg: AugmentConfig, extent: int, rng: np.random.Generator) -> AugmentParams:
    crop = float(rng.integers(cfg.crop_min, cfg.crop_max + 1)) if cfg.crop_max > cfg.crop_min else float(cfg.crop_min)
    slack = (extent - crop) / 2.0
    dx = float(rng.uniform(-slack, slack)) if cfg.jitter and slack > 0 else 0.0
    dy = float(rng.uniform(-slack, slack)) if cfg.jitter and slack > 0 else 0.0
    angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation)) if cfg.max_rotation > 0 else 0.0
    flip = bool(rng.random() < cfg.flip_prob) if cfg.flip_prob > 0 else False
    bright = float(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)) if cfg.brightness > 0 else 1.0
    return AugmentParams(crop, dx, dy, angle, flip, bright)


def _sample_grid(h: int, w: int, p: AugmentParams, out: int):
    s = p.crop / out
    centre = (out - 1) / 2.0
    grid = np.arange(out, dtype=np.float64) - centre
    v, u = np.meshgrid(grid * s, grid * s, indexing="ij")
    theta = np.deg2rad(p.angle)
    cos, sin = np.cos(theta), np.sin(theta)
    xs = (w - 1) / 2.0 + p.dx + (cos * u - sin * v)
    ys = (h - 1) / 2.0 + p.dy + (sin * u + cos * v)
    return ys, xs


def apply_params(seq: np.ndarray, p: AugmentParams, out: int = MODEL_EXTENT) -> np.ndarray:
    """Warp every frame of ``seq[T, C, H, W]`` with the same parameters."""
    t_len, c, h, w = seq.shape
    ys, xs = _sample_grid(h, w, p, out)
    coords = np.stack([ys, xs])
    res = np.empty((t_len, c, out, out))
    for t in range(t_len):
        for ch in range(c):
            res[t, ch] = map_coordinates(seq[t, ch], coords, order=1, mode="nearest")
    if p.flip:
        res = res[..., ::-1]
    if p.brightness != 1.0:
        res = res * p.brightness
    return np.clip(res, 0.0, 1.0)


def augment_sequence(seq: np.ndarray, cfg: AugmentConfig, seed) -> tuple:
    """Randomly crop, rotate, flip and brighten a sequence, coherently over time.

    One draw per sequence; returns ``(frames[T, C, out, out], params_log)``
    where ``params_log`` repeats the parameters once per frame.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 4:
        raise ValueError(f"expected [T, C, H, W] sequence, got shape {seq.shape}")
    extent = min(seq.shape[2], seq.shape[3])
    if extent < cfg.crop_max:
        raise ValueError(f"frames of extent {extent} are smaller than the maximum crop {cfg.crop_max}")
    params = draw_params(cfg, extent, np.random.default_rng(seed))
    frames = apply_params(seq, params, cfg.out_size)
    return frames, [params] * seq.shape[0]


def sample_subsequence(seq: np.ndarray, length: int, seed) -> np.ndarray:
    """Contiguous window of ``length`` frames with a uniform start offset."""
    n = seq.shape[0]
    if length > n:
        raise ValueError(f"subsequence length {length} exceeds sequence length {n}")
    if length < 1:
        raise ValueError("subsequence length must be positive")
    start = int(np.random.default_rng(seed).integers(0, n - length + 1))
    return seq[start:start + length]


def center_view(seq: np.ndarray, crop: int = EVAL_CROP, out: int = MODEL_EXTENT) -> np.ndarray:
    extent = min(seq.shape[2], seq.shape[3])
    if extent < crop:
        raise ValueError(f"frames of extent {extent} are smaller than the crop {crop}")
    return apply_params(seq, AugmentParams(float(crop), 0.0, 0.0, 0.0, False, 1.0), out)


def make_batch(dataset: SequenceDataset, indices, rng: np.random.Generator, length: int | None = None,
               augment: AugmentConfig | None = None, eval_crop: int = EVAL_CROP,
               shuffle: bool = False, reverse: bool = False) -> SequenceBatch:
    """Subsample and augment (or center-crop when ``augment`` is None) a batch.

    ``shuffle`` permutes frame order inside each sequence; ``reverse`` plays
    it backwards (input for the reverse-direction network).
    """
    frames, labels = [], []
    for i in indices:
        seq = dataset.sequences[i]
        seeds = rng.integers(0, 2**63 - 1, size=3)
        if length is not None:
            seq = sample_subsequence(seq, length, seeds[0])
        if shuffle:
            seq = shuffle_frames(seq, seeds[2])
        if reverse:
            seq = seq[::-1]
        if augment is None:
            view = center_view(seq, eval_crop)
        else:
            view, _ = augment_sequence(seq, augment, seeds[1])
        frames.append(view)
        labels.append(dataset.labels[i])
    return SequenceBatch(np.stack(frames), labels, [f.shape[0] for f in frames])


def shuffle_frames(seq: np.ndarray, seed) -> np.ndarray:
    """Random temporal permutation; destroys order, keeps the frame set."""
    return seq[np.random.default_rng(seed).permutation(seq.shape[0])]


# ---------------------------------------------------------------------------
# synthetic order-sensitive task
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """A bright sprite drifting vertically over a noisy background.

    Class ``2k`` moves down at ``speeds[k]`` px/frame and class ``2k+1``
    follows the same path upwards, so both members of a pair show exactly the
    same set of frames.  Vertical motion keeps labels valid under horizontal
    flips.
    """

    n_classes: int = 2
    n_frames: int = 16
    extent: int = 72
    sprite_size: int = 8
    speeds: tuple = (2,)
    noise: float = 0.08
    background: float = 0.3
    contrast: float = 0.5
    n_train: int = 256
    n_test: int = 128
    class_words: tuple = ("down", "up")

    def validate(self):
        if self.n_classes != 2 * len(self.speeds):
            raise ValueError(f"n_classes must be twice the number of speeds ({2 * len(self.speeds)})")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        travel = max(self.speeds) * (self.n_frames - 1) + self.sprite_size
        if travel > self.extent - 24:
            raise ValueError(f"sprite path of {travel} px does not fit inside the central region")

    def motion_scale(self) -> str:
        """Scale tag whose cell size best matches the sprite in model pixels."""
        size = self.sprite_size * MODEL_EXTENT / EVAL_CROP
        k = min((2, 4, 8, 16), key=lambda c: abs(np.log2(c) - np.log2(size)))
        return f"s/{k}"

    def class_name(self, label: int) -> str:
        speed = self.speeds[label // 2]
        direction = "down" if label % 2 == 0 else "up"
        return direction if len(self.speeds) == 1 else f"{direction}{speed}"


def _render(spec: SyntheticTaskSpec, ys, x0, rng) -> np.ndarray:
    n, e, s = len(ys), spec.extent, spec.sprite_size
    frames = spec.background + spec.noise * rng.standard_normal((n, 1, e, e))
    for t, y in enumerate(ys):
        frames[t, 0, y:y + s, x0:x0 + s] += spec.contrast
    frames = np.clip(frames, 0.0, 1.0)
    return np.round(frames * 255.0) / 255.0  # exact 8-bit round trip


def generate_synthetic_dataset(spec: SyntheticTaskSpec, seed: int, split: str = "train") -> SequenceDataset:
    """Labeled sprite sequences; class carried only by the order of frames."""
    spec.validate()
    splits = {"train": 0, "test": 1, "val": 2}
    if split not in splits:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(splits)}")
    count = spec.n_train if split == "train" else spec.n_test
    rng = np.random.default_rng([seed, splits[split]])
    margin = 12
    sequences, labels = [], []
    for _ in range(count):
        label = int(rng.integers(spec.n_classes))
        speed = spec.speeds[label // 2]
        travel = speed * (spec.n_frames - 1)
        y0 = int(rng.integers(margin, spec.extent - margin - spec.sprite_size - travel + 1))
        x0 = int(rng.integers(margin, spec.extent - margin - spec.sprite_size + 1))
        ys = [y0 + speed * t for t in range(spec.n_frames)]
        frames = _render(spec, ys, x0, rng)
        if label % 2 == 1:
            frames = frames[::-1].copy()
        sequences.append(frames)
        labels.append(label)
    meta = {"kind": "synthetic", "split": split, "seed": seed, "motion_scale": spec.motion_scale(),
            "spec": asdict(spec), "class_names": [spec.class_name(c) for c in range(spec.n_classes)]}
    return SequenceDataset(sequences, labels, meta)


# ---------------------------------------------------------------------------
# multi-crop inference
# ---------------------------------------------------------------------------

def multicrop_views(seq: np.ndarray, crops=MULTICROP_SIZES, out: int = MODEL_EXTENT) -> np.ndarray:
    """Center crops at each size plus their mirror images: ``[2*len(crops), T, C, out, out]``."""
    extent = min(seq.shape[2], seq.shape[3])
    if extent < max(crops):
        raise ValueError(f"frames of extent {extent} are smaller than the largest crop {max(crops)}")
    views = []
    for crop in crops:
        v = center_view(seq, crop, out)
        views += [v, v[..., ::-1]]
    return np.stack(views)


def predict_proba(model, frames: np.ndarray, batch_size: int = 32, policy=None) -> np.ndarray:
    """Final-timestep class probabilities for ``frames[B, T, C, H, W]`` in eval mode."""
    from .convlstm import StateStore

    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, frames.shape[0], batch_size):
                logits = model(Tensor(frames[i:i + batch_size]), StateStore(), policy)
                out.append(softmax_np(logits.data[:, -1]))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 0))


def multicrop_predict(model, seq: np.ndarray, crops=MULTICROP_SIZES, return_all: bool = False):
    """Average the six crop/flip predictions for one source sequence."""
    probs = predict_proba(model, multicrop_views(np.asarray(seq, dtype=np.float64), crops))
    mean = probs.mean(axis=0)
    return (mean, probs) if return_all else mean


# ---------------------------------------------------------------------------
# frame files and manifests
# ---------------------------------------------------------------------------

FRAME_MAGIC = b"seqframe"


def write_frame(path, image: np.ndarray):
    """Write ``image[C, H, W]`` (values in [0, 1], C in {1, 3}) as an 8-bit raster."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError(f"frames need 1 or 3 channels, got {c}")
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack(">III", w, h, c) + pixels.tobytes())


def read_frame(path) -> np.ndarray:
    """Read a raster frame into ``[C, H, W]`` floats in [0, 1]."""
    buf = Path(path).read_bytes()
    if buf[:8] != FRAME_MAGIC:
        raise ValueError(f"{path}: bad frame magic")
    if len(buf) < 20:
        raise ValueError(f"{path}: truncated header")
    w, h, c = struct.unpack(">III", buf[8:20])
    if c not in (1, 3):
        raise ValueError(f"{path}: unsupported channel count {c}")
    if len(buf) != 20 + w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} pixel bytes, found {len(buf) - 20}")
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=20).reshape(h, w, c)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def parse_label(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def load_frame_directory(path, manifest: str = "manifest.tsv") -> tuple:
    """Load sequences listed in a manifest; bad sequences are skipped and reported.

    Each manifest line is ``<id>\\t<label>\\t<frame,frame,...>`` with frame
    paths relative to ``path``.  Returns ``(dataset, report)``.
    """
    root = Path(path)
    mpath = root / manifest
    sequences, labels, ids, report = [], [], [], []
    for lineno, line in enumerate(mpath.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            report.append({"line": lineno, "id": parts[0], "error": "expected 3 tab-separated fields"})
            log.warning("manifest line %d: malformed record", lineno)
            continue
        seq_id, label, frame_list = parts
        try:
            frames = [read_frame(root / name) for name in frame_list.split(",") if name]
            if not frames:
                raise ValueError("no frames listed")
            shapes = {f.shape for f in frames}
            if len(shapes) != 1:
                raise ValueError(f"inconsistent frame extents {sorted(shapes)}")
        except (OSError, ValueError) as exc:
            report.append({"line": lineno, "id": seq_id, "error": str(exc)})
            log.warning("skipping sequence %s: %s", seq_id, exc)
            continue
        sequences.append(np.stack(frames))
        labels.append(parse_label(label))
        ids.append(seq_id)
    meta = {"kind": "frame-directory", "path": str(root), "ids": ids}
    return SequenceDataset(sequences, labels, meta), report


def write_frame_directory(dataset: SequenceDataset, path, manifest: str = "manifest.tsv"):
    """Inverse of :func:`load_frame_directory` (8-bit quantized frames)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (seq, label) in enumerate(zip(dataset.sequences, dataset.labels)):
        names = []
        for t, frame in enumerate(seq):
            name = f"seq{i:05d}_{t:03d}.frm"
            write_frame(root / name, frame)
            names.append(name)
        lines.append(f"seq{i:05d}\t{label}\t{','.join(names)}")
    (root / manifest).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    (root / "metadata.json").write_text(json.dumps(dataset.metadata, indent=2, sort_keys=True, default=str))
