"""Command-line entry point: ``advdmd <subcommand> [flags]``.

Every ``--out`` is a directory; it is created if missing. Exit status is 0 on
success, 1 when a run fails and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import trainer
from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, TrainConfig, dump_config, load_config
from .evalbench import EvalSet, evaluate_samples, median_summary, report_dict, run_ablation
from .flowmatch import MixtureTarget, ode_sample
from .sdesim import SdeSchedule
from .seeding import derive_rng

log = logging.getLogger("advdmd")

VARIANT_FLAGS = {"advdmd": "advdmd", "dmd2": "dmd2", "grpo-fixed": "grpo_fixed"}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ manifest


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int
    version: str
    started: str
    finished: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _start_run(command: str, argv: list[str], cfg: TrainConfig, out: Path) -> tuple[RunManifest, Path]:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg) + "\n", encoding="utf-8")
    manifest = RunManifest(command, list(argv), cfg.to_dict(), cfg.seed, version_string(), _now(),
                           outputs={"config": str(out / "config.json")})
    path = out / "manifest.json"
    manifest.write(path)
    return manifest, path


def _finish_run(manifest: RunManifest, path: Path) -> None:
    manifest.finished = _now()
    manifest.write(path)


# ------------------------------------------------------------------ outputs


def _palette(n: int) -> list[str]:
    return [f"hsl({round(360.0 * k / max(n, 1))},70%,45%)" for k in range(n)]


def emit_scatter_svg(samples: np.ndarray, target: MixtureTarget, path: str | Path,
                     conditions: np.ndarray | None = None, size: int = 480) -> None:
    """Write a standalone SVG scatter plot of 2-D samples over the mixture modes.

    Modes are drawn as outlined circles of radius ``3 * std``; sample dots take
    the colour of their condition. Output bytes depend only on the inputs.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        samples = samples.reshape(0, 2)
    if samples.ndim != 2 or samples.shape[1] != 2 or target.data_dim != 2:
        raise ValueError(f"scatter plot needs 2-D data, got samples of shape {samples.shape}")
    if conditions is None:
        conditions = np.zeros(len(samples), dtype=np.int64)
    extent = float(np.max(np.abs(target.means))) + 6.0 * target.std + 0.5
    scale = size / (2.0 * extent)

    def px(p):
        return (p[0] + extent) * scale, (extent - p[1]) * scale

    colors = _palette(target.n_conditions)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for k, m in enumerate(target.means):
        x, y = px(m)
        lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{3.0 * target.std * scale:.2f}" '
                     f'fill="none" stroke="{colors[k]}" stroke-width="1.5"/>')
    for p, c in zip(samples, conditions):
        if not np.all(np.isfinite(p)):
            continue
        x, y = px(p)
        lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="{colors[int(c) % len(colors)]}" '
                     'fill-opacity="0.6"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_samples_csv(samples: np.ndarray, conditions: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("x", "y", "c"))
        for (x, y), c in zip(samples, conditions):
            w.writerow((repr(float(x)), repr(float(y)), int(c)))


# ------------------------------------------------------------------ commands


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _load_any(path: str):
    """Return ``(kind, model_or_state, cfg)`` for a teacher or student checkpoint."""
    kind = read_checkpoint(path).echo.get("kind")
    if kind == "teacher":
        teacher, cfg = trainer.load_teacher(path)
        return kind, teacher, cfg
    if kind == "student":
        state, cfg = trainer.load_checkpoint(path)
        return kind, state, cfg
    raise CheckpointError("wrong_kind", f"unknown checkpoint kind {kind!r}")


def cmd_train_teacher(args, argv) -> int:
    cfg = _config(args)
    out = Path(args.out)
    manifest, mpath = _start_run("train-teacher", argv, cfg, out)
    teacher = trainer.fit_teacher(cfg)
    ckpt = out / "teacher.ckpt"
    trainer.save_teacher(teacher, cfg, ckpt)
    report = trainer.evaluate_teacher(teacher, cfg, cfg.seed, w_cfg=1.0)
    (out / "teacher_metrics.json").write_text(json.dumps(report_dict(report), indent=2) + "\n", encoding="utf-8")
    manifest.outputs.update(checkpoint=str(ckpt), metrics=str(out / "teacher_metrics.json"))
    _finish_run(manifest, mpath)
    print(f"teacher saved to {ckpt} (mmd2 {report.mmd2:.5f}, coverage {report.mode_coverage:.3f})")
    return 0


def cmd_distill(args, argv) -> int:
    cfg = _config(args)
    changes = {}
    if args.variant:
        changes["variant"] = VARIANT_FLAGS[args.variant]
    if args.sim:
        changes["sim"] = args.sim
    cfg = cfg.replace(**changes) if changes else cfg
    teacher, _ = trainer.load_teacher(args.teacher)
    out = Path(args.out)
    manifest, mpath = _start_run("distill", argv, cfg, out)
    metrics = out / "metrics.csv"
    state, _ = trainer.train(cfg, teacher, metrics_path=metrics)
    ckpt = out / "student.ckpt"
    trainer.save_checkpoint(state, cfg, ckpt)
    report = trainer.evaluate_state(state, cfg)
    (out / "eval.json").write_text(json.dumps(report_dict(report), indent=2) + "\n", encoding="utf-8")
    manifest.outputs.update(metrics=str(metrics), checkpoint=str(ckpt), eval=str(out / "eval.json"))
    _finish_run(manifest, mpath)
    if state.incidents:
        print(f"{len(state.incidents)} update(s) skipped after non-finite losses", file=sys.stderr)
    print(f"{cfg.variant}-{cfg.sim} seed {cfg.seed}: mmd2 {report.mmd2:.5f}, w2 {report.w2:.4f}, "
          f"coverage {report.mode_coverage:.3f}")
    return 0


def cmd_sample(args, argv) -> int:
    kind, obj, cfg = _load_any(args.ckpt)
    target = trainer.make_target(cfg)
    rng = derive_rng(cfg.seed if args.seed is None else args.seed, "cli-sample")
    c = rng.integers(0, target.n_conditions, size=args.n)
    z = rng.standard_normal((args.n, target.data_dim))
    if kind == "teacher":
        steps = args.steps or cfg.teacher_eval_steps
        x, _ = ode_sample(obj, z, c, steps, 1.0, np.asarray(SdeSchedule.uniform(steps).t_grid))
    else:
        steps = args.steps or cfg.n_student_steps
        x = trainer.sample_student(obj, cfg.replace(n_student_steps=steps), z, c)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_samples_csv(x, c, out / "samples.csv")
    emit_scatter_svg(x, target, out / "samples.svg", c)
    print(f"{args.n} samples ({steps} steps) written to {out}")
    return 0


def cmd_eval(args, argv) -> int:
    kind, obj, cfg = _load_any(args.ckpt)
    seed = cfg.seed if args.seed is None else args.seed
    if kind == "teacher":
        report = trainer.evaluate_teacher(obj, cfg, seed, w_cfg=1.0)
    else:
        report = trainer.evaluate_state(obj, cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report_dict(report), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report_dict(report)))
    return 0


def cmd_ablate(args, argv) -> int:
    if args.matrix != "default":
        raise UsageError(f"unknown matrix {args.matrix!r}; only 'default' is defined")
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    cfg = _config(args)
    out = Path(args.out)
    manifest, mpath = _start_run("ablate", argv, cfg, out)
    if args.teacher:
        teacher, _ = trainer.load_teacher(args.teacher)
    else:
        teacher = trainer.fit_teacher(cfg)
    table = out / "ablation.csv"
    rows = run_ablation(cfg, teacher, list(range(args.seeds)), out_path=table)
    summary = median_summary(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.outputs.update(table=str(table), summary=str(out / "summary.json"))
    _finish_run(manifest, mpath)
    for variant, med in summary.items():
        print(f"{variant:14s} median mmd2 {med['mmd2']:.5f}  coverage {med['coverage']:.3f}")
    failed = [r for r in rows if "error" in r]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advdmd", description="Few-step distillation on a 2-D Gaussian ring.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")

    s = sub.add_parser("train-teacher", help="fit the multi-step flow-matching teacher")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="distil a few-step student from a teacher checkpoint")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    s.add_argument("--sim", choices=("sde", "ode"))
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("sample", help="draw samples from a checkpoint (CSV and SVG)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=2048)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="compute sample metrics for a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run the sim x variant x seed ablation table")
    s.add_argument("--matrix", default="default")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--config")
    s.add_argument("--teacher")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"advdmd: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, OSError, ValueError, FloatingPointError) as exc:
        print(f"advdmd: {exc}", file=sys.stderr)
        return 1
