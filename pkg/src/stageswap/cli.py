"""Command-line surface: training, compression, baselines, sweeps, eval, report.

Every command reads an optional key=value config file, writes its artifacts
(checkpoint + per-epoch metrics) into the output directory, and exits 0 on
success or 1 with a diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import (CheckpointError, load_checkpoint, save_checkpoint,
                         split_prefix)
from .config import RunConfig, config_from_dict, parse_config
from .data import gen_eval_set
from .model import TrackerModel
from .oracles import run_suite
from .report import render_report
from .train import (EVAL_SAMPLES, DivergenceError, evaluate, run_student_training,
                    train_teacher)

BASELINE_MODES = ("naive", "distill", "decoupled")


class CliError(Exception):
    """User-facing command failure with a one-line diagnostic."""


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key=value config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the config seed")
    common.add_argument("--out", metavar="PATH",
                        help="output directory for checkpoints and metrics")
    common.add_argument("--f64", action="store_true",
                        help="run oracle models in 64-bit precision")

    parser = argparse.ArgumentParser(
        prog="stageswap",
        description="stage-swap compression of a toy transformer tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train-teacher", parents=[common],
                   help="train the deep teacher from scratch")

    p = sub.add_parser("compress", parents=[common],
                       help="progressive stage-replacement compression")
    p.add_argument("--teacher", required=True, metavar="PATH",
                   help="teacher checkpoint from train-teacher")

    p = sub.add_parser("baseline", parents=[common],
                       help="baseline student training regimes")
    p.add_argument("--mode", required=True, choices=BASELINE_MODES)
    p.add_argument("--teacher", required=True, metavar="PATH")

    p = sub.add_parser("sweep-p", parents=[common],
                       help="fixed-probability sweep with a short finetune tail")
    p.add_argument("--teacher", required=True, metavar="PATH")
    p.add_argument("--p-list", required=True, metavar="P1,P2,...",
                   help="comma-separated replacement probabilities in [0, 1]")

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on the held-out set")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--hanning", choices=("on", "off"), default="off",
                   help="apply the Hanning window penalty to the score map")

    sub.add_parser("oracle", parents=[common],
                   help="run the independent oracle suite")

    p = sub.add_parser("report", parents=[common],
                       help="render figures and a summary table from metrics files")
    p.add_argument("--metrics", required=True, nargs="+", metavar="PATH",
                   help="one or more per-epoch metrics files")
    return parser


def _load_config(args, regime: str) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {"regime": regime}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_(**overrides)


def _out_dir(args, default: str) -> str:
    out = args.out or os.path.join("runs", default)
    os.makedirs(out, exist_ok=True)
    return out


def _load_teacher(path: str, cfg: RunConfig) -> TrackerModel:
    if not os.path.exists(path):
        raise CliError(f"teacher checkpoint not found: {path}")
    ck = load_checkpoint(path)
    tensors = ck.tensors
    if any(name.startswith("teacher.") for name in tensors):
        tensors = split_prefix(tensors, "teacher.")
    saved = config_from_dict(ck.config)
    for field in ("teacher_layers", "embed_dim", "heads", "mlp_ratio",
                  "patch", "template", "search"):
        have, want = getattr(saved, field), getattr(cfg, field)
        if have != want:
            raise CliError(f"teacher checkpoint {field}={have} does not match "
                           f"config {field}={want}")
    teacher = TrackerModel(saved.teacher_model_config(), np.random.default_rng(0))
    teacher.load_state(tensors)
    teacher.freeze()
    return teacher


def _save_pair(teacher: TrackerModel, student: TrackerModel, cfg: RunConfig,
               path: str):
    tensors = teacher.state("teacher.")
    tensors.update(student.state("student."))
    save_checkpoint(tensors, cfg.to_dict(), path)


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args, "teacher")
    out = _out_dir(args, "teacher")
    metrics_path = os.path.join(out, "metrics.txt")
    teacher, records = train_teacher(cfg, metrics_path=metrics_path)
    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    save_checkpoint(teacher.state(), cfg.to_dict(), ckpt_path)
    print(f"teacher: {len(records)} epochs, final acc {records[-1].acc:.4f}, "
          f"wrote {ckpt_path}")
    return 0


def _run_student(args, regime: str, out_name: str) -> int:
    cfg = _load_config(args, regime)
    teacher = _load_teacher(args.teacher, cfg)
    out = _out_dir(args, out_name)
    metrics_path = os.path.join(out, "metrics.txt")
    result = run_student_training(cfg, teacher, metrics_path=metrics_path)
    ckpt_path = os.path.join(out, "checkpoint.ckpt")
    _save_pair(teacher, result.student, cfg, ckpt_path)
    print(f"{regime}: {len(result.records)} epochs, final acc "
          f"{result.records[-1].acc:.4f}, wrote {ckpt_path}")
    return 0


def cmd_compress(args) -> int:
    return _run_student(args, "compress", "compress")


def cmd_baseline(args) -> int:
    return _run_student(args, args.mode, f"baseline-{args.mode}")


def _parse_p_list(text: str) -> list[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise CliError(f"bad --p-list: {e}") from e
    if not values:
        raise CliError("--p-list is empty")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise CliError(f"--p-list values must lie in [0, 1], got {v}")
    return values


def cmd_sweep_p(args) -> int:
    p_values = _parse_p_list(args.p_list)
    cfg = _load_config(args, "sweep")
    teacher = _load_teacher(args.teacher, cfg)
    out = _out_dir(args, "sweep")
    rows = []
    for p in p_values:
        run_dir = os.path.join(out, f"p_{p:g}")
        os.makedirs(run_dir, exist_ok=True)
        metrics_path = os.path.join(run_dir, "metrics.txt")
        result = run_student_training(cfg, teacher, metrics_path=metrics_path,
                                      fixed_p=p)
        _save_pair(teacher, result.student, cfg,
                   os.path.join(run_dir, "checkpoint.ckpt"))
        rows.append((p, result.records[-1].acc, result.records[-1].off_err))
    summary_path = os.path.join(out, "summary.tsv")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write("p\tfinal_acc\tfinal_off_err\n")
        for p, acc, off in rows:
            f.write(f"{p:g}\t{acc:.6f}\t{off:.6f}\n")
    print("p\tfinal_acc\tfinal_off_err")
    for p, acc, off in rows:
        print(f"{p:g}\t{acc:.6f}\t{off:.6f}")
    print(f"wrote {summary_path}")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ck.config)
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    if any(name.startswith("student.") for name in ck.tensors):
        model = TrackerModel(cfg.student_model_config(), np.random.default_rng(0))
        model.load_state(split_prefix(ck.tensors, "student."))
        which = "student"
    else:
        model = TrackerModel(cfg.teacher_model_config(), np.random.default_rng(0))
        model.load_state(ck.tensors)
        which = "teacher"
    samples = gen_eval_set(cfg.task_spec(), EVAL_SAMPLES, cfg.seed)
    ev = evaluate(model, samples, use_hanning=args.hanning == "on")
    print(f"model={which} hanning={args.hanning} acc={ev.acc:.6f} "
          f"off_err={ev.off_err:.6f} iou={ev.iou:.6f}")
    return 0


def cmd_oracle(args) -> int:
    results = run_suite(f64=args.f64, seed=args.seed if args.seed is not None else 0)
    failed = 0
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name}: {r.detail}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} oracle checks passed")
    return 0 if failed == 0 else 1


def cmd_report(args) -> int:
    out = _out_dir(args, "report")
    written = render_report(args.metrics, out)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "compress": cmd_compress,
    "baseline": cmd_baseline,
    "sweep-p": cmd_sweep_p,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CliError, ValueError, CheckpointError, DivergenceError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
