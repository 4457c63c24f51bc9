"""Run configuration: INI-style files with ``include`` chaining and flag overrides."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .arch import ArchSpec, full_scale_spec, reduced_spec, vggm_spec
from .data import AugmentConfig, SyntheticTaskSpec
from .probe import ProbeConfig
from .training import ConfigError, CurriculumSchedule, TrainSettings

PRESETS = {"full": full_scale_spec, "reduced": reduced_spec, "vggm": vggm_spec}


def default_config_path() -> Path:
    return Path(str(resources.files("deepconvlstm") / "configs" / "synthetic.cfg"))


def _read_chain(path: Path, parser: configparser.ConfigParser, seen: tuple):
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    own = configparser.ConfigParser(interpolation=None)
    try:
        own.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    include = own.get("run", "include", fallback="").strip()
    if include:
        _read_chain((path.parent / include), parser, seen + (path,))
    for section in own.sections():
        if not parser.has_section(section):
            parser.add_section(section)
        for key, value in own.items(section):
            if key != "include":
                parser.set(section, key, value)
    # keep relative paths anchored to the file that named them
    for section, key in (("run", "arch"), ("data", "source")):
        value = own.get(section, key, fallback=None) if own.has_section(section) else None
        if value and value not in PRESETS and value != "synthetic" and not Path(value).is_absolute():
            parser.set(section, key, str(path.parent / value))


def load_parser(path=None, overrides=None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    for section in ("run", "data", "train", "eval", "probe"):
        parser.add_section(section)
    _read_chain(Path(path) if path else default_config_path(), parser, ())
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    return parser


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


@dataclass
class RunConfig:
    seed: int
    out: Path
    arch: ArchSpec
    arch_source: str
    data_source: str = "synthetic"
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    steps: int = 200
    curriculum: CurriculumSchedule = field(default_factory=lambda: CurriculumSchedule([(0, 16)]))
    checkpoint_every: int = 50
    val_fraction: float = 0.0
    multicrop: bool = False
    reverse_checkpoint: str = ""
    checkpoint: str = ""
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    deterministic: bool = False

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "RunConfig":
        try:
            return cls._build(parser)
        except ConfigError:
            raise
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from None
        except (ValueError, KeyError, configparser.Error) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None

    @classmethod
    def _build(cls, p: configparser.ConfigParser) -> "RunConfig":
        run, data, train, ev, probe = (p["run"], p["data"], p["train"], p["eval"], p["probe"])
        if "seed" not in run:
            raise ConfigError("a seed is required (run.seed or --seed)")
        synthetic = SyntheticTaskSpec(
            n_classes=data.getint("n_classes", 2),
            n_frames=data.getint("n_frames", 16),
            extent=data.getint("extent", 72),
            sprite_size=data.getint("sprite_size", 8),
            speeds=_ints(data.get("speeds", "2")),
            noise=data.getfloat("noise", 0.08),
            background=data.getfloat("background", 0.3),
            contrast=data.getfloat("contrast", 0.5),
            n_train=data.getint("n_train", 256),
            n_test=data.getint("n_test", 128),
        )
        arch_source = run.get("arch", "reduced")
        if arch_source in PRESETS:
            arch = PRESETS[arch_source]() if arch_source != "reduced" else reduced_spec(synthetic.n_classes)
        else:
            if not Path(arch_source).is_file():
                raise ConfigError(f"architecture spec not found: {arch_source}")
            arch = ArchSpec.load(arch_source)
        augment = AugmentConfig() if train.getboolean("augment", True) else None
        settings = TrainSettings(
            batch_size=train.getint("batch_size", 8),
            lr=train.getfloat("lr", 1e-3),
            clip=train.getfloat("clip", 5.0) or None,
            window=train.getint("window", 8),
            patience=train.getint("patience", 3),
            lr_floor=train.getfloat("lr_floor", 1e-6),
            eval_every=train.getint("eval_every", 25),
            augment=augment,
            task=arch.head if arch.head == "ctc" else "word",
            shuffle_frames=train.getboolean("shuffle_frames", False),
            direction=train.get("direction", "forward"),
        )
        if settings.direction not in ("forward", "reverse"):
            raise ConfigError(f"train.direction must be forward or reverse, got {settings.direction!r}")
        source = data.get("source", "synthetic")
        if source != "synthetic" and not Path(source).is_dir():
            raise ConfigError(f"frame directory not found: {source}")
        probe_cfg = ProbeConfig(
            scales=tuple(s.strip() for s in probe.get("scales", ",".join(ProbeConfig.scales)).split(",") if s.strip()),
            periods=_ints(probe.get("periods", "1 3 5 10 15")),
            eval_size=probe.getint("eval_size") if probe.get("eval_size", "").strip() else None,
            seed=run.getint("seed"),
        )
        cfg = cls(
            seed=run.getint("seed"),
            out=Path(run.get("out", "runs/default")),
            arch=arch, arch_source=arch_source,
            data_source=source, synthetic=synthetic, train=settings,
            steps=train.getint("steps", 200),
            curriculum=CurriculumSchedule.parse(train.get("curriculum", f"0:{synthetic.n_frames}")),
            checkpoint_every=train.getint("checkpoint_every", 50),
            val_fraction=train.getfloat("val_fraction", 0.0),
            multicrop=ev.getboolean("multicrop", False),
            reverse_checkpoint=ev.get("reverse_checkpoint", ""),
            checkpoint=ev.get("checkpoint", ""),
            probe=probe_cfg,
            deterministic=run.getboolean("deterministic", False),
        )
        if cfg.steps < 0 or settings.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if source == "synthetic":
            try:
                synthetic.validate()
            except ValueError as exc:
                raise ConfigError(f"synthetic task: {exc}") from None
        return cfg


def load_run_config(path=None, overrides=None) -> RunConfig:
    return RunConfig.from_parser(load_parser(path, overrides))


def dump_parser(parser: configparser.ConfigParser, path):
    with Path(path).open("w") as fh:
        parser.write(fh)
