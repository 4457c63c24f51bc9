"""Declarative network specs, the residual and VGG-M style ConvLSTM builders, and the layer census."""
from __future__ import annotations

import configparser
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .convlstm import ConvLSTM, ResetPolicy, StateStore, run_sequence
from .layers import BatchNorm, Conv2d, DenseLSTM, Linear, LockedDropout, MaxPool, Module
from .tensor import Tensor, relu


class SpecError(ValueError):
    """An architecture spec is malformed or its channels do not chain."""


@dataclass
class StageSpec:
    blocks: int
    in_ch: int
    mid_ch: int
    out_ch: int
    downsample: bool = True


@dataclass
class VggLayerSpec:
    out_ch: int
    kernel: int = 3
    pool: bool = False


@dataclass
class ArchSpec:
    kind: str = "resnet"
    input_size: int = 48
    in_channels: int = 1
    stem_channels: int = 32
    stem_kernel: int = 3
    stem_stride: int = 1
    stages: list = field(default_factory=list)
    vgg_layers: list = field(default_factory=list)
    head: str = "word"
    num_classes: int = 500
    lstm_hidden: int = 512
    dropout: float = 0.5
    batch_norm: bool = True

    def to_text(self) -> str:
        lines = ["[arch]"]
        for key in ("kind", "input_size", "in_channels", "stem_channels", "stem_kernel",
                    "stem_stride", "head", "num_classes", "lstm_hidden", "dropout"):
            lines.append(f"{key} = {getattr(self, key)}")
        lines.append(f"batch_norm = {'yes' if self.batch_norm else 'no'}")
        if self.stages:
            lines.append("# blocks in_ch mid_ch out_ch downsample")
            lines.append("stages =")
            for s in self.stages:
                lines.append(f"    {s.blocks} {s.in_ch} {s.mid_ch} {s.out_ch} {int(s.downsample)}")
        if self.vgg_layers:
            lines.append("# out_ch kernel pool")
            lines.append("vgg_layers =")
            for v in self.vgg_layers:
                lines.append(f"    {v.out_ch} {v.kernel} {int(v.pool)}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_section(cls, section) -> "ArchSpec":
        spec = cls()
        ints = ("input_size", "in_channels", "stem_channels", "stem_kernel", "stem_stride",
                "num_classes", "lstm_hidden")
        try:
            for key in ints:
                if key in section:
                    setattr(spec, key, int(section[key]))
            for key in ("kind", "head"):
                if key in section:
                    setattr(spec, key, section[key].strip())
            if "dropout" in section:
                spec.dropout = float(section["dropout"])
            if "batch_norm" in section:
                spec.batch_norm = section.getboolean("batch_norm") if hasattr(section, "getboolean") \
                    else section["batch_norm"].strip().lower() in ("yes", "true", "1", "on")
            spec.stages = [StageSpec(*(int(v) for v in row[:4]), downsample=bool(int(row[4])) if len(row) > 4 else True)
                           for row in _table(section.get("stages", ""))]
            spec.vgg_layers = [VggLayerSpec(int(row[0]), int(row[1]) if len(row) > 1 else 3,
                                            bool(int(row[2])) if len(row) > 2 else False)
                               for row in _table(section.get("vgg_layers", ""))]
        except (ValueError, TypeError) as exc:
            raise SpecError(f"bad arch spec value: {exc}") from None
        return spec

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
        cp.read_string(text)
        if "arch" not in cp:
            raise SpecError("spec text has no [arch] section")
        return cls.from_section(cp["arch"])

    @classmethod
    def load(cls, path) -> "ArchSpec":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"arch spec not found: {path}")
        return cls.from_text(path.read_text())

    def save(self, path):
        Path(path).write_text(self.to_text())


def _table(text: str) -> list:
    rows = []
    for line in text.splitlines():
        line = line.split("#")[0].strip()
        if line:
            rows.append(line.split())
    return rows


# default specs ----------------------------------------------------------------

def full_scale_spec() -> ArchSpec:
    """The 48-layer network: sub-blocks (3, 6, 3, 2), widths landing near 14.5M parameters."""
    return ArchSpec(
        kind="resnet", stem_channels=32,
        stages=[StageSpec(3, 32, 22, 88), StageSpec(6, 88, 44, 176),
                StageSpec(3, 176, 88, 352), StageSpec(2, 352, 176, 704)],
        num_classes=500, lstm_hidden=512, dropout=0.5,
    )


def reduced_spec(num_classes: int = 2) -> ArchSpec:
    """Narrow desk-scale network with stage sub-blocks (1, 2, 1, 1)."""
    return ArchSpec(
        kind="resnet", stem_channels=8,
        stages=[StageSpec(1, 8, 8, 16), StageSpec(2, 16, 8, 24),
                StageSpec(1, 24, 12, 32), StageSpec(1, 32, 16, 48)],
        num_classes=num_classes, lstm_hidden=32, dropout=0.5,
    )


def vggm_spec(num_classes: int = 500) -> ArchSpec:
    return ArchSpec(
        kind="vggm", stem_channels=64, stem_stride=2,
        vgg_layers=[VggLayerSpec(96, 3, True), VggLayerSpec(192, 3, True),
                    VggLayerSpec(256, 3, False), VggLayerSpec(256, 3, True)],
        num_classes=num_classes, lstm_hidden=512,
    )


# blocks -----------------------------------------------------------------------

def _scale_tag(factor: int) -> str:
    return "s" if factor == 1 else f"s/{factor}"


def _norm(ch: int, enabled: bool):
    return BatchNorm(ch) if enabled else None


def _apply(norm, x):
    return x if norm is None else norm(x)


class Stem(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, rng, batch_norm=True):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, rng=rng)
        self.bn = _norm(out_ch, batch_norm)
        self.conv.scale = "s" if stride == 1 else _scale_tag(stride)

    def __call__(self, x, store=None, policy=None):
        return relu(_apply(self.bn, self.conv(x)))


class BlockA(Module):
    """Downsampling residual sub-block with a 1x1 ConvLSTM on the skip path."""

    def __init__(self, in_ch, mid_ch, out_ch, stride=2, scale="s", rng=None, batch_norm=True):
        rng = rng or np.random.default_rng(0)
        self.reduce = Conv2d(in_ch, mid_ch, 1, rng=rng)
        self.bn1 = _norm(mid_ch, batch_norm)
        self.lstm = ConvLSTM(mid_ch, mid_ch, 3, stride, rng=rng, scale=scale)
        self.bn2 = _norm(mid_ch, batch_norm)
        self.expand = Conv2d(mid_ch, out_ch, 1, rng=rng)
        self.bn3 = _norm(out_ch, batch_norm)
        self.skip = ConvLSTM(in_ch, out_ch, 1, stride, rng=rng, scale=scale, name="skip")
        self.bn_skip = _norm(out_ch, batch_norm)
        self.reduce.scale = self.expand.scale = scale

    def __call__(self, x, store=None, policy=None):
        y = relu(_apply(self.bn1, self.reduce(x)))
        y = relu(_apply(self.bn2, self.lstm(y, store, policy)))
        y = _apply(self.bn3, self.expand(y))
        s = _apply(self.bn_skip, self.skip(x, store, policy))
        return relu(y + s)


class BlockB(Module):
    """Residual sub-block with an identity skip."""

    def __init__(self, ch, mid_ch, scale="s", rng=None, batch_norm=True):
        rng = rng or np.random.default_rng(0)
        self.reduce = Conv2d(ch, mid_ch, 1, rng=rng)
        self.bn1 = _norm(mid_ch, batch_norm)
        self.lstm = ConvLSTM(mid_ch, mid_ch, 3, 1, rng=rng, scale=scale)
        self.bn2 = _norm(mid_ch, batch_norm)
        self.expand = Conv2d(mid_ch, ch, 1, rng=rng)
        self.bn3 = _norm(ch, batch_norm)
        self.reduce.scale = self.expand.scale = scale

    def __call__(self, x, store=None, policy=None):
        y = relu(_apply(self.bn1, self.reduce(x)))
        y = relu(_apply(self.bn2, self.lstm(y, store, policy)))
        y = _apply(self.bn3, self.expand(y))
        # ReLU after the sum is the identity on the non-negative inputs every
        # block receives, so zero parameters pass the input through.
        return relu(x + y)


class ConvLstmStage(Module):
    def __init__(self, layers, norms, pools):
        self.layers, self.norms, self.pools = layers, norms, pools

    def __call__(self, x, store=None, policy=None):
        for lstm, norm, pool in zip(self.layers, self.norms, self.pools):
            x = relu(_apply(norm, lstm(x, store, policy)))
            if pool is not None:
                x = pool(x)
        return x


class Head(Module):
    """Spatial average pool, locked dropout, dense LSTM, per-timestep linear scores."""

    def __init__(self, in_ch, hidden, n_out, dropout, rng):
        self.dropout = LockedDropout(dropout)
        self.lstm = DenseLSTM(in_ch, hidden, rng=rng)
        self.classifier = Linear(hidden, n_out, rng=rng)

    def __call__(self, x, store=None, policy=None):
        pooled = x.mean(axis=(3, 4))
        h = self.lstm(self.dropout(pooled, store, policy), store, policy)
        return self.classifier(h)


class SequenceModel(Module):
    """Layer stack mapping ``[B, T, C, H, W]`` frames to ``[B, T, K]`` scores."""

    def __init__(self, spec: ArchSpec, layers: list, extents: list):
        self.spec = spec
        self.layers = layers
        self.extents = extents
        for path, mod in self.named_modules():
            if getattr(mod, "recurrent", False) or isinstance(mod, LockedDropout):
                mod.name = path

    def recurrent_layers(self) -> list:
        return [m for m in self.modules() if getattr(m, "recurrent", False)]

    def __call__(self, x, store: StateStore | None = None, policy: ResetPolicy | None = None):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return run_sequence(self.layers, x, store, policy)

    forward = __call__


def _check_chain(spec: ArchSpec):
    if spec.head not in ("word", "ctc"):
        raise SpecError(f"unknown head {spec.head!r}")
    if spec.num_classes < 1 or spec.lstm_hidden < 1:
        raise SpecError("num_classes and lstm_hidden must be positive")
    if spec.stem_kernel not in (1, 3) or spec.stem_stride not in (1, 2):
        raise SpecError("stem kernel must be 1 or 3 and stride 1 or 2")


def build_block_a(in_ch, mid_ch, out_ch, stride=2, scale="s", rng=None, batch_norm=True) -> BlockA:
    if stride not in (1, 2):
        raise SpecError(f"Block A stride must be 1 or 2, got {stride}")
    return BlockA(in_ch, mid_ch, out_ch, stride, scale, rng, batch_norm)


def build_block_b(in_ch, mid_ch, scale="s", rng=None, batch_norm=True) -> BlockB:
    return BlockB(in_ch, mid_ch, scale, rng, batch_norm)


def build_resnet_convlstm(spec: ArchSpec, seed: int = 0) -> SequenceModel:
    _check_chain(spec)
    if not spec.stages:
        raise SpecError("resnet spec needs at least one stage")
    rng = np.random.default_rng(seed)
    stem = Stem(spec.in_channels, spec.stem_channels, spec.stem_kernel, spec.stem_stride, rng, spec.batch_norm)
    layers = [stem]
    extent = stem.conv.out_extent(spec.input_size)
    factor = spec.stem_stride
    extents = [extent]
    ch = spec.stem_channels
    for i, st in enumerate(spec.stages):
        if st.blocks < 1:
            raise SpecError(f"stage {i + 1}: needs at least one sub-block")
        if st.in_ch != ch:
            raise SpecError(f"stage {i + 1}: in_ch {st.in_ch} does not match incoming {ch} channels")
        stride = 2 if st.downsample else 1
        factor *= stride
        extent = (extent - 1) // stride + 1
        scale = _scale_tag(factor)
        blocks = [build_block_a(st.in_ch, st.mid_ch, st.out_ch, stride, scale, rng, spec.batch_norm)]
        blocks += [build_block_b(st.out_ch, st.mid_ch, scale, rng, spec.batch_norm) for _ in range(st.blocks - 1)]
        layers.extend(blocks)
        extents.append(extent)
        ch = st.out_ch
    n_out = spec.num_classes + (1 if spec.head == "ctc" else 0)
    layers.append(Head(ch, spec.lstm_hidden, n_out, spec.dropout, rng))
    return SequenceModel(spec, layers, extents)


def build_vggm_convlstm(spec: ArchSpec, seed: int = 0) -> SequenceModel:
    _check_chain(spec)
    if not spec.vgg_layers:
        raise SpecError("vggm spec needs at least one ConvLSTM layer")
    rng = np.random.default_rng(seed)
    stem = Stem(spec.in_channels, spec.stem_channels, spec.stem_kernel, spec.stem_stride, rng, spec.batch_norm)
    extent = stem.conv.out_extent(spec.input_size)
    factor = spec.stem_stride
    extents = [extent]
    lstms, norms, pools = [], [], []
    ch = spec.stem_channels
    for v in spec.vgg_layers:
        lstms.append(ConvLSTM(ch, v.out_ch, v.kernel, 1, rng=rng, scale=_scale_tag(factor)))
        norms.append(_norm(v.out_ch, spec.batch_norm))
        if v.pool:
            if extent % 2:
                raise SpecError(f"cannot pool odd extent {extent}")
            pools.append(MaxPool(2))
            extent //= 2
            factor *= 2
        else:
            pools.append(None)
        extents.append(extent)
        ch = v.out_ch
    n_out = spec.num_classes + (1 if spec.head == "ctc" else 0)
    layers = [stem, ConvLstmStage(lstms, norms, pools), Head(ch, spec.lstm_hidden, n_out, spec.dropout, rng)]
    return SequenceModel(spec, layers, extents)


def build_model(spec: ArchSpec, seed: int = 0) -> SequenceModel:
    if spec.kind == "resnet":
        return build_resnet_convlstm(spec, seed)
    if spec.kind == "vggm":
        return build_vggm_convlstm(spec, seed)
    raise SpecError(f"unknown architecture kind {spec.kind!r}")


# census -----------------------------------------------------------------------

@dataclass
class LayerCensus:
    convlstm_3x3: int = 0
    convlstm_1x1: int = 0
    conv2d_1x1: int = 0
    conv2d_other: int = 0
    dense_lstm: int = 0
    layers: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.convlstm_3x3 + self.convlstm_1x1 + self.conv2d_1x1 + self.conv2d_other + self.dense_lstm

    @property
    def by_scale(self) -> dict:
        return dict(Counter(scale for _, _, scale in self.layers))

    def as_dict(self) -> dict:
        return {"convlstm_3x3": self.convlstm_3x3, "convlstm_1x1": self.convlstm_1x1,
                "conv2d_1x1": self.conv2d_1x1, "conv2d_other": self.conv2d_other,
                "dense_lstm": self.dense_lstm, "total": self.total, "by_scale": dict(self.by_scale)}


def census(model: Module) -> LayerCensus:
    """Count parameterized layers by kind and record each one's scale tag."""
    out = LayerCensus()
    for path, mod in model.named_modules():
        if isinstance(mod, ConvLSTM):
            kind = "convlstm_1x1" if mod.kernel == 1 else "convlstm_3x3"
        elif isinstance(mod, Conv2d):
            kind = "conv2d_1x1" if mod.kernel == 1 else "conv2d_other"
        elif isinstance(mod, DenseLSTM):
            kind = "dense_lstm"
        else:
            continue
        setattr(out, kind, getattr(out, kind) + 1)
        out.layers.append((path, kind, getattr(mod, "scale", "s")))
    return out
