"""Experiment matrix: label-missing ratios x distillation methods x seeds."""

from __future__ import annotations

import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .distill import DistillMethod, Method
from .metrics import MetricsReport, reports_to_csv
from .model import load_model, save_model
from .synthgen import DatasetSpec, corrupt_missing, generate, stack, to_single_label
from .trainer import TeacherKnowledge, TrainConfig, config_hash, teacher_config, train_student, train_teacher

log = logging.getLogger(__name__)

SINGLE = "single"


def default_methods() -> list[DistillMethod]:
    return [
        DistillMethod(Method.NONE),
        DistillMethod(Method.SOFT_TARGET),
        DistillMethod(Method.HARD_TARGET),
        DistillMethod(Method.FEATURE),
        DistillMethod(Method.ATTENTION_MAP),
        DistillMethod(Method.CAMS, use_teacher_prob=False),
        DistillMethod(Method.CAMS),
    ]


def ratio_label(ratio: float | str) -> str:
    return SINGLE if ratio == SINGLE else repr(float(ratio))


@dataclass
class ExperimentMatrix:
    missing_ratios: list = field(default_factory=lambda: [1.0, 0.75, 0.4, SINGLE])
    methods: list[DistillMethod] = field(default_factory=default_methods)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    student: TrainConfig = field(default_factory=TrainConfig)
    teacher: TrainConfig = field(default_factory=teacher_config)
    teacher_mode: str = "corrupted"
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        for r in self.missing_ratios:
            if r != SINGLE and not (isinstance(r, (int, float)) and 0.0 <= r <= 1.0):
                raise ValueError(f"missing ratio must be in [0, 1] or '{SINGLE}', got {r!r}")
        if self.teacher_mode not in ("corrupted", "full"):
            raise ValueError(f"teacher_mode must be 'corrupted' or 'full', got {self.teacher_mode!r}")
        if not self.methods or not self.seeds or not self.missing_ratios:
            raise ValueError("matrix needs at least one ratio, method and seed")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate methods in matrix: {labels}")

    def to_dict(self) -> dict:
        return {
            "missing_ratios": list(self.missing_ratios),
            "methods": [m.to_dict() for m in self.methods],
            "seeds": list(self.seeds),
            "dataset": self.dataset.to_dict(),
            "student": self.student.to_dict(),
            "teacher": self.teacher.to_dict(),
            "teacher_mode": self.teacher_mode,
            "record_wall_time": self.record_wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentMatrix:
        d = dict(d)
        kwargs: dict = {}
        if "missing_ratios" in d:
            kwargs["missing_ratios"] = list(d.pop("missing_ratios"))
        if "methods" in d:
            kwargs["methods"] = [DistillMethod.from_dict(m) for m in d.pop("methods")]
        if "seeds" in d:
            kwargs["seeds"] = [int(s) for s in d.pop("seeds")]
        if "dataset" in d:
            ds = dict(d.pop("dataset"))
            if "grid" in ds:
                ds["grid"] = tuple(ds["grid"])
            kwargs["dataset"] = DatasetSpec(**ds)
        if "student" in d:
            kwargs["student"] = TrainConfig.from_dict(d.pop("student"))
        if "teacher" in d:
            base = teacher_config().to_dict()
            base.update(d.pop("teacher"))
            kwargs["teacher"] = TrainConfig.from_dict(base)
        for key in ("teacher_mode", "record_wall_time"):
            if key in d:
                kwargs[key] = d.pop(key)
        if d:
            raise ValueError(f"unknown matrix fields: {sorted(d)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentMatrix:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def build_split(spec: DatasetSpec, ratio, seed: int):
    """Dataset for one matrix seed with the training labels degraded per ``ratio``."""
    train, val = generate(replace(spec, seed=seed))
    if ratio == SINGLE:
        train = to_single_label(train, seed=seed)
    elif ratio < 1.0:
        train = corrupt_missing(train, float(ratio), seed=seed)
    return train, val


@dataclass
class CellResult:
    ratio: str
    method: str
    seed: int
    report: MetricsReport | None
    error: str | None = None
    distill_curve: list[float] = field(default_factory=list)


def _teacher_path(out: Path, matrix: ExperimentMatrix, ratio, seed: int) -> Path:
    tag = ratio_label(ratio) if matrix.teacher_mode == "corrupted" else "full"
    key = config_hash(matrix.dataset.to_dict(), matrix.teacher.to_dict(), {"labels": tag})[:8]
    return out / "teachers" / f"teacher_{tag}_seed{seed}_{key}.ckpt"


def run_group(matrix: ExperimentMatrix, ratio, seed: int, out: Path) -> list[CellResult]:
    """All methods for one (ratio, seed): one dataset, one teacher, one student per method."""
    rlabel = ratio_label(ratio)
    try:
        train, val = build_split(matrix.dataset, ratio, seed)
        images, y_full, y_obs = stack(train)
        val_images, val_labels, _ = stack(val)
        tpath = _teacher_path(out, matrix, ratio, seed)
        if tpath.exists():
            teacher = load_model(tpath)
        else:
            teacher_labels = y_obs if matrix.teacher_mode == "corrupted" else y_full
            tres = train_teacher(replace(matrix.teacher, seed=seed), images, teacher_labels, val_images, val_labels)
            teacher = tres.model
            tpath.parent.mkdir(parents=True, exist_ok=True)
            save_model(tpath, teacher, {"val_map": tres.report.map})
        know = TeacherKnowledge.compute(teacher, images)
    except Exception:
        err = traceback.format_exc()
        return [CellResult(rlabel, m.label, seed, None, err) for m in matrix.methods]

    results = []
    for method in matrix.methods:
        cfg = replace(matrix.student, method=method, seed=seed)
        try:
            res = train_student(cfg, know, images, y_obs, val_images, val_labels)
        except Exception:
            results.append(CellResult(rlabel, method.label, seed, None, traceback.format_exc()))
            continue
        report = res.report
        report.config_hash = config_hash(
            matrix.dataset.to_dict(), cfg.to_dict(), {"ratio": rlabel, "teacher_mode": matrix.teacher_mode}
        )
        report.extra = {"ratio": rlabel}
        curve = [row["distill_loss"] for row in res.log]
        results.append(CellResult(rlabel, method.label, seed, report, None, curve))
    return results


def _cell_name(ratio: str, method: str, seed: int) -> str:
    return f"{ratio}_{method}_seed{seed}.json"


def run_matrix(matrix: ExperimentMatrix, out: str | Path, jobs: int = 1) -> tuple[str, list[CellResult]]:
    """Run every cell, write per-cell JSON reports and ``aggregate.csv``; return the CSV text."""
    out = Path(out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    groups = [(r, s) for r in matrix.missing_ratios for s in matrix.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_group, matrix, r, s, out) for r, s in groups]
            nested = [f.result() for f in futures]
    else:
        nested = [run_group(matrix, r, s, out) for r, s in groups]
    results = [c for group in nested for c in group]

    for cell in results:
        path = out / "cells" / _cell_name(cell.ratio, cell.method, cell.seed)
        if cell.report is not None:
            cell.report.save(path)
        else:
            log.error("cell %s/%s/seed %d failed:\n%s", cell.ratio, cell.method, cell.seed, cell.error)
            path.with_suffix(".error.txt").write_text(cell.error or "")

    csv_text = aggregate_csv(matrix, results)
    (out / "aggregate.csv").write_text(csv_text)
    (out / "matrix.json").write_text(json.dumps(matrix.to_dict(), indent=2, sort_keys=True) + "\n")
    return csv_text, results


def medians(results: list[CellResult]) -> dict[tuple[str, str], float]:
    """Median validation mAP across seeds for each (ratio, method) with at least one finished cell."""
    buckets: dict[tuple[str, str], list[float]] = {}
    for c in results:
        if c.report is not None:
            buckets.setdefault((c.ratio, c.method), []).append(c.report.map)
    return {k: float(np.median(v)) for k, v in buckets.items()}


def aggregate_csv(matrix: ExperimentMatrix, results: list[CellResult]) -> str:
    chash = matrix.hash()
    order = {(ratio_label(r), m.label, s): i for i, (r, m, s) in enumerate(
        (r, m, s) for r in matrix.missing_ratios for m in matrix.methods for s in matrix.seeds
    )}
    rows = []
    for c in sorted(results, key=lambda c: order[(c.ratio, c.method, c.seed)]):
        rep = c.report
        rows.append({
            "ratio": c.ratio,
            "method": c.method,
            "seed": c.seed,
            "map": rep.map if rep else None,
            "top1": rep.top1 if rep else None,
            "wall_time_s": rep.wall_time_s if rep and matrix.record_wall_time else None,
            "config_hash": chash,
        })
    med = medians(results)
    for r in matrix.missing_ratios:
        for m in matrix.methods:
            key = (ratio_label(r), m.label)
            rows.append({
                "ratio": key[0],
                "method": key[1],
                "seed": "median",
                "map": med.get(key),
                "config_hash": chash,
            })
    return reports_to_csv(rows)


def default_jobs() -> int:
    return max(1, min(os.cpu_count() or 1, 8))
