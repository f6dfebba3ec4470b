"""Command line entry point: ``svdkd {train-teacher,distill,sweep-k,verify,eval}``.

Every config field is exposed as a dotted flag (``--train.beta 2``) on top of
a named preset and an optional JSON config file. Exit codes: 0 success,
1 configuration or input error, 2 numerical failure (verification or NaN).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from . import verify
from .autograd.checkpoint import CheckpointError
from .config import (ConfigError, ExperimentConfig, PRESETS, field_paths, from_dict, load_config,
                     load_datasets, set_path)
from .data import DatasetError, channel_mean
from .models import build, load_model, preset
from .training import METRIC_COLUMNS, NumericalError, RunResult, evaluate, run_mechanism, train_teacher

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
SWEEP_COLUMNS = ("k", "variant", "final_test_acc", "final_transfer_loss", "status")
DEFAULT_VARIANTS = ("tiny-vgg-S", "tiny-vgg-S-stride")

ALIASES = {
    "out_dir": "--out",
    "train.mechanism": "--mechanism",
    "train.k": "--k",
    "train.beta": "--beta",
    "train.epochs": "--epochs",
    "train.seed": "--seed",
    "train.label_fraction": "--label-fraction",
    "train.transfer_weight": "--transfer-weight",
    "train.clip_mode": "--clip-mode",
}

log = logging.getLogger("svdkd")


# ---------------------------------------------------------------- config flags

def _flag(path: str) -> str:
    return "--" + path.replace("_", "-")


def _coerce(raw: str, default, path: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{_flag(path)}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"{_flag(path)}: expected {type(default).__name__}, got {raw!r}") from None


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment config")
    g.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="base settings (default: desk)")
    g.add_argument("--config", help="JSON config merged over the preset")
    for path, default in field_paths():
        if path == "version":
            continue
        names = [_flag(path)] + ([ALIASES[path]] if path in ALIASES else [])
        g.add_argument(*names, dest="cfg:" + path, default=None, metavar=type(default).__name__.upper())


def resolve_config(args, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = base or PRESETS[args.preset]()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    over: dict = {}
    for path, default in field_paths(cfg):
        raw = getattr(args, "cfg:" + path, None)
        if raw is not None:
            set_path(over, path, _coerce(raw, default, path))
    return from_dict(over, cfg)


# ---------------------------------------------------------------- run outputs

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunWriter:
    """Owns a run directory: resolved config, streaming metrics.csv, checkpoint, summary."""

    def __init__(self, cfg: ExperimentConfig):
        self.dir = cfg.run_dir
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "config.json").write_text(cfg.to_json())
            self._fh = open(self.dir / "metrics.csv", "w", newline="")
        except OSError as e:
            raise ConfigError(f"cannot write run directory {self.dir}: {e.strerror}") from None
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(METRIC_COLUMNS)

    def on_epoch(self, row: dict) -> None:
        self._csv.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
        self._fh.flush()

    def finish(self, model, summary: dict) -> None:
        self._fh.close()
        model.save(self.dir / "model.ckpt")
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def _summary(cfg: ExperimentConfig, role: str, model_name: str, result: RunResult, model) -> dict:
    return {
        "role": role,
        "model": model_name,
        "mechanism": cfg.train.mechanism if role == "student" else None,
        "param_count": model.param_count(),
        "final_test_acc": result.final_test_acc,
        "final_transfer_loss": None if math.isnan(result.final_transfer_loss) else result.final_transfer_loss,
        "epochs_logged": len(result.history),
    }


def train_teacher_run(cfg: ExperimentConfig) -> RunResult:
    train, test = load_datasets(cfg.replace(train=_teacher_train_cfg(cfg)))
    model = build(preset(cfg.teacher_model, train.num_classes), cfg.train.seed, channel_mean(train))
    writer = RunWriter(cfg)
    try:
        result = train_teacher(model, _teacher_train_cfg(cfg), train, test, on_epoch=writer.on_epoch)
    finally:
        writer.close()
    writer.finish(model, _summary(cfg, "teacher", cfg.teacher_model, result, model))
    return result


def _teacher_train_cfg(cfg: ExperimentConfig):
    return dataclasses.replace(cfg.train, epochs=cfg.teacher_epochs, label_fraction=1.0)


def load_teacher(path, cfg: ExperimentConfig, classes: int):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"teacher checkpoint not found: {p}")
    try:
        return load_model(p, preset(cfg.teacher_model, classes))
    except ValueError as e:
        raise ConfigError(f"teacher checkpoint {p} does not load as {cfg.teacher_model}: {e}") from None


def distill_run(cfg: ExperimentConfig, teacher_path) -> RunResult:
    train, test = load_datasets(cfg)
    teacher = load_teacher(teacher_path, cfg, train.num_classes)
    student = build(preset(cfg.student_model, train.num_classes), cfg.train.seed, channel_mean(train))
    writer = RunWriter(cfg)
    try:
        result = run_mechanism(teacher, student, cfg.train, train, test, on_epoch=writer.on_epoch)
    finally:
        writer.close()
    writer.finish(student, _summary(cfg, "student", cfg.student_model, result, student))
    return result


# ---------------------------------------------------------------- commands

def cmd_train_teacher(args) -> int:
    cfg = resolve_config(args)
    t0 = time.time()
    result = train_teacher_run(cfg)
    print(f"teacher {cfg.teacher_model}: final test accuracy {result.final_test_acc:.2f}% "
          f"({time.time() - t0:.0f}s) -> {cfg.run_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    t0 = time.time()
    result = distill_run(cfg, args.teacher)
    print(f"student {cfg.student_model} [{cfg.train.mechanism}, transfer weight {cfg.train.transfer_weight:g}]: "
          f"final test accuracy {result.final_test_acc:.2f}%, transfer loss {result.final_transfer_loss:.5g} "
          f"({time.time() - t0:.0f}s) -> {cfg.run_dir}")
    return EXIT_OK


def parse_k_list(text: str) -> List[int]:
    """Comma-separated k values, duplicates dropped, first occurrence order kept."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            k = int(part)
        except ValueError:
            raise ConfigError(f"--k-list: {part!r} is not an integer") from None
        if k not in out:
            out.append(k)
    if not out:
        raise ConfigError("--k-list is empty")
    return out


def _sweep_job(cfg_dict: dict, teacher_path: str, k: int, variant: str) -> dict:
    row = {"k": k, "variant": variant, "final_test_acc": math.nan, "final_transfer_loss": math.nan}
    try:
        sub = from_dict(cfg_dict)
        sub = from_dict({"run_id": f"k{k}-{variant}", "student_model": variant, "train": {"k": k}}, sub)
        result = distill_run(sub, teacher_path)
    except (ValueError, NumericalError) as e:
        log.warning("sweep k=%d %s failed: %s", k, variant, e)
        row["status"] = f"failed: {e}"
        return row
    row.update(final_test_acc=result.final_test_acc, final_transfer_loss=result.final_transfer_loss, status="ok")
    return row


def cmd_sweep_k(args) -> int:
    cfg = resolve_config(args)
    ks = parse_k_list(args.k_list)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        preset(v)
    if not Path(args.teacher).exists():
        raise ConfigError(f"teacher checkpoint not found: {args.teacher}")
    base = cfg.replace(out_dir=str(cfg.run_dir))
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.json").write_text(cfg.to_json())
    jobs = [(base.to_dict(), str(args.teacher), k, v) for k in ks for v in variants]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, *zip(*jobs)))
    else:
        rows = [_sweep_job(*j) for j in jobs]
    path = cfg.run_dir / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    for r in rows:
        print(f"k={r['k']:<3d} {r['variant']:<20s} acc {r['final_test_acc']:7.2f}  "
              f"transfer {r['final_transfer_loss']:.5g}  {r['status']}")
    print(f"summary -> {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(quick=args.quick, inject_fault=args.inject_fault or "")
    report = verify.format_report(results)
    print(report)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    base = None
    if not args.config and (ckpt.parent / "config.json").exists():
        base = load_config(ckpt.parent / "config.json")
    cfg = resolve_config(args, base)
    name = args.model
    if name is None:
        summary = ckpt.parent / "summary.json"
        if not summary.exists():
            raise ConfigError(f"--model is required: no summary.json next to {ckpt}")
        name = json.loads(summary.read_text())["model"]
    train, test = load_datasets(cfg)
    try:
        model = load_model(ckpt, preset(name, train.num_classes))
    except ValueError as e:
        raise ConfigError(f"{ckpt}: {e}") from None
    res = evaluate(model, test)
    print(json.dumps({"checkpoint": str(ckpt), "model": name, "test_acc": res["acc"], "test_loss": res["loss"]}))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svdkd", description="SVD-based feature distillation experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-teacher", help="train the teacher network")
    add_config_flags(s)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="train a student with one of the two mechanisms")
    s.add_argument("--teacher", required=True, help="teacher checkpoint")
    add_config_flags(s)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("sweep-k", help="distil students for several k values")
    s.add_argument("--teacher", required=True, help="teacher checkpoint")
    s.add_argument("--k-list", required=True, help="comma-separated k values, e.g. 1,2,4")
    s.add_argument("--variants", default=",".join(DEFAULT_VARIANTS), help="student presets")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    add_config_flags(s)
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("verify", help="run the numerical self-checks")
    s.add_argument("--quick", action="store_true", help="fewer random cases")
    s.add_argument("--inject-fault", choices=["svd-sign"], help="deliberately break a component")
    s.add_argument("--report", help="also write the report to this file")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--model", help="model preset (default: from summary.json beside the checkpoint)")
    add_config_flags(s)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        where = f" ({e.filename})" if e.filename else ""
        print(f"error: {e.strerror or e}{where}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
