"""Command-line entry point: ``mlkd <command> [options]``.

Outputs go under ``--out`` or, when that is omitted, under a per-command
directory inside ``$MLKD_OUT`` (default ``./mlkd_out``).

Exit codes: 0 success, 1 a cell or check failed, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .distill import DistillMethod, Method
from .gradcheck import TOLERANCE, gradient_suite
from .heatmaps import DISPLAY_THRESHOLD, emit_heatmaps
from .matrix import ExperimentMatrix, default_jobs, medians, ratio_label, run_matrix
from .metrics import reports_to_csv
from .model import load_model, save_model
from .synthgen import DatasetSpec, corrupt_missing, generate, load_dataset, save_dataset, stack, to_single_label
from .trainer import TeacherKnowledge, TrainConfig, TrainingAborted, teacher_config, train_student, train_teacher

log = logging.getLogger("mlkd")

OUT_ENV = "MLKD_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


def _out_dir(args: argparse.Namespace, default_name: str) -> Path:
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "mlkd_out")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(data: str):
    root = Path(data)
    if not (root / "train.mlkd").exists() or not (root / "val.mlkd").exists():
        raise ConfigError(f"{root}: expected train.mlkd and val.mlkd (run 'mlkd generate' first)")
    train, val = load_dataset(root / "train.mlkd"), load_dataset(root / "val.mlkd")
    images, y_full, y_obs = stack(train)
    val_images, val_labels, _ = stack(val)
    return images, y_full, y_obs, val_images, val_labels


def _method_from_args(args: argparse.Namespace) -> DistillMethod:
    kw = {"kind": Method(args.method), "lam": args.lam, "tau": args.tau, "threshold": args.threshold}
    kw["use_teacher_prob"] = not args.no_teacher_prob
    kw["raw_attention"] = args.raw_attention
    return DistillMethod(**kw)


def cmd_generate(args: argparse.Namespace) -> int:
    spec = DatasetSpec(
        num_classes=args.num_classes,
        glyph_density=args.density,
        noise_sigma=args.noise_sigma,
        n_train=args.n_train,
        n_val=args.n_val,
        seed=args.seed,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.keep_ratio is not None and args.single_label:
        raise ConfigError("--keep-ratio and --single-label are mutually exclusive")
    if args.keep_ratio is not None and not 0.0 <= args.keep_ratio <= 1.0:
        raise ConfigError(f"--keep-ratio must lie in [0, 1], got {args.keep_ratio}")

    train, val = generate(spec)
    if args.single_label:
        train = to_single_label(train, seed=args.seed)
    elif args.keep_ratio is not None:
        train = corrupt_missing(train, args.keep_ratio, seed=args.seed)

    out = _out_dir(args, "data")
    save_dataset(out / "train.mlkd", train)
    save_dataset(out / "val.mlkd", val)
    labels = {"keep_ratio": args.keep_ratio, "single_label": args.single_label}
    _write_json(out / "dataset.json", {"spec": spec.to_dict(), "labels": labels})

    _, y_full, y_obs = stack(train)
    freq = y_full.mean(axis=0)
    print(f"wrote {len(train)} train / {len(val)} val examples to {out}")
    print("class frequency: " + " ".join(f"{k}:{f:.3f}" for k, f in enumerate(freq)))
    counts = np.bincount(y_full.sum(axis=1).astype(int), minlength=spec.num_classes + 1)
    print("positives per image: " + " ".join(f"{n}:{c}" for n, c in enumerate(counts) if c))
    if args.keep_ratio is not None:
        n_pos, kept = int(y_full.sum()), int(y_obs.sum())
        sigma = math.sqrt(n_pos * args.keep_ratio * (1 - args.keep_ratio))
        lo, hi = n_pos * args.keep_ratio - 3 * sigma, n_pos * args.keep_ratio + 3 * sigma
        verdict = "within" if lo <= kept <= hi else "OUTSIDE"
        print(
            f"retained positives: {kept}/{n_pos} = {kept / n_pos:.4f} "
            f"({verdict} 3-sigma band [{lo:.0f}, {hi:.0f}])"
        )
    return EXIT_OK


def cmd_train_teacher(args: argparse.Namespace) -> int:
    images, y_full, y_obs, val_images, val_labels = _load_split(args.data)
    cfg = teacher_config(epochs=args.epochs, seed=args.seed)
    labels = y_obs if args.teacher_on_corrupted else y_full
    res = train_teacher(cfg, images, labels, val_images, val_labels)
    out = _out_dir(args, "teacher")
    save_model(out / "teacher.ckpt", res.model, {"val_map": res.report.map})
    res.report.save(out / "teacher_report.json")
    res.save_log(out / "teacher_log.jsonl")
    print(f"teacher val mAP {res.report.map:.4f} -> {out / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_train_student(args: argparse.Namespace) -> int:
    images, _, y_obs, val_images, val_labels = _load_split(args.data)
    method = _method_from_args(args)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, method=method)
    teacher = load_model(args.teacher)
    res = train_student(cfg, teacher, images, y_obs, val_images, val_labels)
    out = _out_dir(args, "student")
    stem = f"student_{method.label}_seed{args.seed}"
    save_model(out / f"{stem}.ckpt", res.model, {"method": method.to_dict()})
    res.report.save(out / f"{stem}_report.json")
    res.save_log(out / f"{stem}_log.jsonl")
    print(f"{method.label} student val mAP {res.report.map:.4f} -> {out / (stem + '.ckpt')}")
    return EXIT_OK


def cmd_run_matrix(args: argparse.Namespace) -> int:
    matrix = ExperimentMatrix.load(args.config) if args.config else ExperimentMatrix()
    if args.seeds:
        matrix = replace(matrix, seeds=args.seeds)
    if args.teacher_mode:
        matrix = replace(matrix, teacher_mode=args.teacher_mode)
    out = _out_dir(args, "matrix")
    _, results = run_matrix(matrix, out, jobs=args.jobs or default_jobs())
    med = medians(results)
    for r in matrix.missing_ratios:
        rl = ratio_label(r)
        row = "  ".join(f"{m.label}={med[(rl, m.label)]:.4f}" for m in matrix.methods if (rl, m.label) in med)
        print(f"ratio {rl}: {row}")
    failed = [c for c in results if c.error]
    print(f"wrote {out / 'aggregate.csv'} ({len(results) - len(failed)}/{len(results)} cells ok)")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_emit_heatmaps(args: argparse.Namespace) -> int:
    model = load_model(args.checkpoint)
    examples = load_dataset(args.data)
    images = np.stack([e.image for e in examples])
    indices = args.indices if args.indices is not None else list(range(min(args.n, len(images))))
    bad = [i for i in indices if not 0 <= i < len(images)]
    if bad:
        raise ConfigError(f"example indices out of range: {bad}")
    if not indices:
        raise ConfigError("no examples selected")
    written = emit_heatmaps(model, images, indices, _out_dir(args, "heatmaps"), args.threshold)
    print(f"wrote {len(written)} heatmaps")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    worst = gradient_suite(n_instances=args.instances, seed=args.seed)
    ok = True
    for name, err in worst.items():
        status = "ok" if err <= TOLERANCE else "FAIL"
        ok &= err <= TOLERANCE
        print(f"{name:32s} max rel err {err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_sweep_lambda(args: argparse.Namespace) -> int:
    images, _, y_obs, val_images, val_labels = _load_split(args.data)
    know = TeacherKnowledge.compute(load_model(args.teacher), images)
    rows = []
    for lam in args.lambdas:
        method = replace(_method_from_args(args), lam=lam)
        cfg = TrainConfig(epochs=args.epochs, seed=args.seed, method=method)
        res = train_student(cfg, know, images, y_obs, val_images, val_labels)
        print(f"lambda {lam:g}: val mAP {res.report.map:.4f}")
        rows.append({"ratio": "", "method": f"{method.label}@{lam:g}", "seed": args.seed, "map": res.report.map,
                     "top1": res.report.top1, "config_hash": res.report.config_hash})
    out = _out_dir(args, "sweep")
    (out / "sweep.csv").write_text(reports_to_csv(rows))
    return EXIT_OK


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.NONE.value)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="distillation weight (method default if omitted)")
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--threshold", type=float, default=0.5, help="Hard Target pseudo-label threshold")
    p.add_argument("--no-teacher-prob", action="store_true", help="CAMs loss without teacher-probability weights")
    p.add_argument("--raw-attention", action="store_true", help="attention loss without L2 normalisation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV}/...)")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "write a synthetic train/val dataset")
    p.add_argument("--num-classes", type=int, default=6)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--noise-sigma", type=float, default=0.8)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--keep-ratio", type=float, default=None, help="keep each training positive with this probability")
    p.add_argument("--single-label", action="store_true", help="keep one positive per training image")

    p = add("train-teacher", cmd_train_teacher, "train the teacher on a generated dataset")
    p.add_argument("--data", required=True, help="directory written by 'generate'")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--teacher-on-corrupted", action="store_true", help="train on observed rather than full labels")

    p = add("train-student", cmd_train_student, "train a student with a distillation method")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--epochs", type=int, default=20)
    _add_method_flags(p)

    p = add("run-matrix", cmd_run_matrix, "run the ratio x method x seed experiment matrix")
    p.add_argument("--config", default=None, help="matrix JSON (defaults to the built-in matrix)")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default: CPU count, max 8)")
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--teacher-mode", choices=["corrupted", "full"], default=None)

    p = add("emit-heatmaps", cmd_emit_heatmaps, "write PGM heatmaps of attention maps and CAMs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="a .mlkd dataset file")
    p.add_argument("--n", type=int, default=8, help="number of leading examples")
    p.add_argument("--indices", type=int, nargs="+", default=None)
    p.add_argument("--threshold", type=float, default=DISPLAY_THRESHOLD)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=20)

    p = add("sweep-lambda", cmd_sweep_lambda, "train one student per distillation weight")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 1.0, 10.0, 100.0])
    _add_method_flags(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"mlkd: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, OSError) as exc:
        print(f"mlkd: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
