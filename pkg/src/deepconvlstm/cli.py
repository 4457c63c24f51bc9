"""Command-line entry point: train, eval, probe, verify and gen-data."""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .arch import SpecError, build_model
from .config import ConfigError, RunConfig, dump_parser, load_parser
from .data import SequenceDataset, generate_synthetic_dataset, load_frame_directory, write_frame_directory
from .probe import emit_probe_plot_data, plot_probe, run_probe
from .training import (
    NonFiniteGradientError,
    Trainer,
    evaluate,
    load_checkpoint,
    read_manifest,
    run_curriculum,
    save_checkpoint,
)

log = logging.getLogger("deepconvlstm")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3
METRICS_HEADER = ("step", "loss", "val_accuracy", "lr", "phase")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    """Pin BLAS to one thread so reductions always run in the same order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _int_labels(datasets) -> list:
    """Map non-integer labels (words) to indices, sorted by name."""
    labels = [lab for ds in datasets if ds is not None for lab in ds.labels]
    if all(isinstance(lab, (int, np.integer)) for lab in labels):
        return datasets
    names = sorted({str(lab) for lab in labels})
    index = {name: i for i, name in enumerate(names)}
    out = []
    for ds in datasets:
        if ds is None:
            out.append(None)
            continue
        meta = dict(ds.metadata, class_names=names)
        out.append(SequenceDataset(ds.sequences, [index[str(lab)] for lab in ds.labels], meta))
    return out


def load_datasets(cfg: RunConfig) -> tuple:
    """``(train, val, test)``; ``val`` may be None for frame directories without one."""
    if cfg.data_source == "synthetic":
        spec = cfg.synthetic
        return tuple(generate_synthetic_dataset(spec, cfg.seed, split) for split in ("train", "val", "test"))
    root = Path(cfg.data_source)
    found = []
    for split in ("train", "val", "test"):
        sub = root / split
        if not (sub / "manifest.tsv").is_file():
            if split == "val":
                found.append(None)
                continue
            raise ConfigError(f"frame directory {root} has no {split}/manifest.tsv")
        ds, report = load_frame_directory(sub)
        if report:
            log.warning("%s: skipped %d malformed sequence(s)", sub, len(report))
        found.append(ds)
    return tuple(_int_labels(found))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _read_metrics(path: Path) -> list:
    if not path.is_file():
        return []
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _write_metrics(path: Path, rows: list):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[k]) if not isinstance(row[k], str) else row[k] for k in METRICS_HEADER])


def plot_metrics(rows: list, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [int(r["step"]) for r in rows]
    losses = [float(r["loss"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.8))
    ax.plot(steps, losses, lw=1, color="tab:blue", label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    val = [(int(r["step"]), float(r["val_accuracy"])) for r in rows if r["val_accuracy"] not in ("", None)]
    if val:
        ax2 = ax.twinx()
        ax2.plot([s for s, _ in val], [a for _, a in val], "o-", color="tab:orange", ms=3, label="val accuracy")
        ax2.set_ylabel("val accuracy")
        ax2.set_ylim(0, 1.02)
    ax.set_title("training curve")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def _checkpoint_dir(cfg: RunConfig, override: str | None = None) -> Path:
    if override:
        return Path(override)
    if cfg.checkpoint:
        return Path(cfg.checkpoint)
    return cfg.out / "checkpoint"


def _load_model(cfg: RunConfig, ckpt: Path):
    if not (ckpt / "manifest.json").is_file():
        raise ConfigError(f"no checkpoint at {ckpt}")
    manifest = read_manifest(ckpt)
    if manifest["spec_hash"] != cfg.arch.hash():
        raise ConfigError(f"checkpoint {ckpt} was trained with a different architecture spec "
                          f"({manifest['spec_hash'][:12]} != {cfg.arch.hash()[:12]})")
    model = build_model(cfg.arch, cfg.seed)
    load_checkpoint(ckpt, model)
    model.eval()
    return model


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, resume: bool = False) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    train, val, test = load_datasets(cfg)
    model = build_model(cfg.arch, cfg.seed)
    trainer = Trainer(model, cfg.train, cfg.seed)
    ckpt = cfg.out / "checkpoint"
    metrics_path = cfg.out / "metrics.csv"
    rows = []
    if resume:
        if not (ckpt / "manifest.json").is_file():
            raise ConfigError(f"--resume given but no checkpoint at {ckpt}")
        load_checkpoint(ckpt, model, trainer)
        rows = [r for r in _read_metrics(metrics_path) if int(r["step"]) <= trainer.step]
        log.info("resuming from step %d", trainer.step)
    _write_metrics(metrics_path, rows)

    def on_step(row):
        with metrics_path.open("a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in METRICS_HEADER])
        if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt, model, trainer)
        return None

    try:
        run_curriculum(trainer, cfg.curriculum, train, cfg.steps, val, on_step)
    except NonFiniteGradientError as exc:
        log.error("training diverged: %s; last checkpoint in %s left untouched", exc, ckpt)
        _write_json(cfg.out / "abort.json", {"step": trainer.step, "error": str(exc)})
        return EXIT_RUNTIME
    save_checkpoint(ckpt, model, trainer)
    rows = _read_metrics(metrics_path)
    if rows:
        plot_metrics(rows, cfg.out / "training_curve.png")
    result = evaluate(model, test)
    summary = {"steps": trainer.step, "test": result, "parameters": model.num_parameters(),
               "spec_hash": cfg.arch.hash(), "seed": cfg.seed}
    _write_json(cfg.out / "train_summary.json", summary)
    print(f"trained {trainer.step} steps; test top-1 {result['top1']:.4f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None, multicrop: bool | None = None,
             reverse_checkpoint: str | None = None, shuffled: bool = False) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    _, _, test = load_datasets(cfg)
    model = _load_model(cfg, _checkpoint_dir(cfg, checkpoint))
    reverse_path = reverse_checkpoint or cfg.reverse_checkpoint
    reverse = _load_model(cfg, Path(reverse_path)) if reverse_path else None
    use_multicrop = cfg.multicrop if multicrop is None else multicrop
    result = evaluate(model, test, multicrop=use_multicrop, reverse_model=reverse,
                      shuffle_seed=cfg.seed if shuffled else None)
    result.update({"multicrop": use_multicrop, "bidirectional": reverse is not None, "shuffled": shuffled})
    _write_json(cfg.out / "eval.json", result)
    print(" ".join(f"{k}={result[k]:.4f}" for k in ("top1", "top5", "top10")))
    return EXIT_OK


def cmd_probe(cfg: RunConfig, checkpoint: str | None = None) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    _, _, test = load_datasets(cfg)
    model = _load_model(cfg, _checkpoint_dir(cfg, checkpoint))
    report = run_probe(model, test, cfg.probe)
    emit_probe_plot_data(report, cfg.out / "probe.csv")
    plot_probe(report, cfg.out / "probe.png")
    _write_json(cfg.out / "probe.json", {"baseline": report.baseline, **report.metadata})
    print(f"baseline {report.baseline:.4f}")
    for scale, period, acc, drop in report.rows():
        print(f"{scale:>10} T={period:<3d} accuracy={acc:.4f} drop={drop:+.2f}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, suites=None) -> int:
    from .verify import run_suites

    cfg.out.mkdir(parents=True, exist_ok=True)
    report = run_suites(suites)
    _write_json(cfg.out / "verify.json", report)
    for name, r in report["suites"].items():
        print(f"{name:<10} {'PASS' if r['passed'] else 'FAIL'}  ({r['seconds']:.1f}s)")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_gen_data(cfg: RunConfig) -> int:
    if cfg.data_source != "synthetic":
        raise ConfigError("gen-data needs data.source = synthetic")
    root = cfg.out / "data"
    for split in ("train", "val", "test"):
        target = root / split
        if target.exists():
            shutil.rmtree(target)
        ds = generate_synthetic_dataset(cfg.synthetic, cfg.seed, split)
        write_frame_directory(ds, target)
        print(f"{split}: {len(ds)} sequences -> {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (default: bundled synthetic.cfg)")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-exact reruns")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deepconvlstm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write metrics + checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    p.add_argument("--steps", type=int, help="overrides train.steps")

    p = sub.add_parser("eval", parents=[common], help="top-1/5/10 accuracy of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--multicrop", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--reverse-checkpoint", help="reverse-direction network for bidirectional fusion")
    p.add_argument("--shuffled", action="store_true", help="evaluate on frame-shuffled sequences")

    p = sub.add_parser("probe", parents=[common], help="state-reset sensitivity probe")
    p.add_argument("--checkpoint")
    p.add_argument("--scales", help="comma-separated scale tags")
    p.add_argument("--periods", help="comma-separated reset periods")

    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--suite", action="append", choices=["gradients", "ctc", "census", "tbptt"])

    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset as frame directories")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if args.seed is not None:
        out["run.seed"] = args.seed
    if args.out is not None:
        out["run.out"] = args.out
    if args.deterministic:
        out["run.deterministic"] = "yes"
    if getattr(args, "steps", None) is not None:
        out["train.steps"] = args.steps
    if getattr(args, "scales", None):
        out["probe.scales"] = args.scales
    if getattr(args, "periods", None):
        out["probe.periods"] = args.periods
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = load_parser(args.config, _overrides(args))
        cfg = RunConfig.from_parser(raw)
        cfg.out.mkdir(parents=True, exist_ok=True)
        dump_parser(raw, cfg.out / f"{args.command}.cfg")
        with deterministic_mode(cfg.deterministic):
            if args.command == "train":
                return cmd_train(cfg, resume=args.resume)
            if args.command == "eval":
                return cmd_eval(cfg, args.checkpoint, args.multicrop, args.reverse_checkpoint, args.shuffled)
            if args.command == "probe":
                return cmd_probe(cfg, args.checkpoint)
            if args.command == "verify":
                return cmd_verify(cfg, args.suite)
            return cmd_gen_data(cfg)
    except (ConfigError, SpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
