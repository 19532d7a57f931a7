"""Teacher pretraining and student distillation loops."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import distill as D
from .distill import ChannelAdapter, DistillMethod, Method
from .metrics import MetricsReport, mean_average_precision
from .model import STUDENT_WIDTHS, TEACHER_WIDTHS, Model, forward, init_model, predict_logits
from .tensor import Tensor


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; the message carries epoch/batch/loss diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    method: DistillMethod = field(default_factory=DistillMethod)
    seed: int = 0
    widths: tuple[int, ...] = STUDENT_WIDTHS
    patch_grid: tuple[int, int] = (4, 4)
    patch_px: int = 8

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "patch_grid", tuple(self.patch_grid))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.to_dict()
        d["betas"] = list(self.betas)
        d["widths"] = list(self.widths)
        d["patch_grid"] = list(self.patch_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "method" in d:
            d["method"] = DistillMethod.from_dict(d["method"])
        return cls(**d)


def teacher_config(**overrides) -> TrainConfig:
    return TrainConfig(widths=TEACHER_WIDTHS, **overrides)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam with decoupled weight decay, updating ``params`` in place."""
    b1, b2 = betas
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingAborted("adam_step: non-finite gradient")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * update


@dataclass
class TeacherKnowledge:
    """Frozen teacher outputs for every training image, computed once."""

    feature_maps: np.ndarray  # [N, HW, C_T]
    feature: np.ndarray  # [N, C_T]
    logits: np.ndarray  # [N, K]
    probs: np.ndarray  # [N, K]
    attention: np.ndarray  # [N, HW]
    cams: np.ndarray  # [N, K, HW]

    @classmethod
    def compute(cls, teacher: Model, images: np.ndarray, batch_size: int = 256) -> TeacherKnowledge:
        parts: dict[str, list[np.ndarray]] = {k: [] for k in ("feature_maps", "feature", "logits", "probs", "attention", "cams")}
        for start in range(0, len(images), batch_size):
            b = forward(teacher, images[start:start + batch_size])
            for k in parts:
                parts[k].append(getattr(b, k).data)
        return cls(**{k: np.concatenate(v) for k, v in parts.items()})


@dataclass
class TrainResult:
    model: Model
    report: MetricsReport
    log: list[dict]
    adapter: ChannelAdapter | None = None

    def save_log(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for row in self.log:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def evaluate(model: Model, val_images: np.ndarray, val_labels: np.ndarray) -> MetricsReport:
    return mean_average_precision(predict_logits(model, val_images), val_labels, top_k=(1, 5))


def _check_finite(values: dict, epoch: int, batch: int) -> None:
    if not all(np.isfinite(v) for v in values.values()):
        detail = ", ".join(f"{k}={v!r}" for k, v in values.items())
        raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


def _run(
    config: TrainConfig,
    model: Model,
    images: np.ndarray,
    step_loss,
    extra_params: list[Tensor],
) -> list[dict]:
    params = model.parameters() + extra_params
    state = AdamState.zeros_like(params)
    shuffle = np.random.default_rng([config.seed, 0x5F])
    n = len(images)
    log = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(n)
        for batch, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            cls_loss, distill_loss, loss = step_loss(idx)
            values = {
                "cls_loss": cls_loss.item(),
                "distill_loss": distill_loss.item() if distill_loss is not None else 0.0,
                "total": loss.item(),
            }
            _check_finite(values, epoch, batch)
            for p in params:
                p.grad = None
            loss.backward()
            try:
                adam_step(params, [p.grad for p in params], state, config.lr, config.betas, config.weight_decay, config.eps)
            except TrainingAborted as exc:
                detail = ", ".join(f"{k}={v!r}" for k, v in values.items())
                raise TrainingAborted(f"{exc} at epoch {epoch}, batch {batch}: {detail}") from None
            log.append({"step": step, "epoch": epoch, **values})
            step += 1
    for p in params:
        p.grad = None
    return log


def train_teacher(
    config: TrainConfig,
    images: np.ndarray,
    labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
) -> TrainResult:
    """Fit a model from scratch with plain binary cross-entropy on ``labels``."""
    if config.method.kind is not Method.NONE:
        raise ValueError("teacher training takes no distillation method")
    num_classes = labels.shape[1]
    model = init_model(num_classes, config.widths, config.patch_grid, config.patch_px, seed=config.seed, stream=1)
    labels = np.asarray(labels, dtype=np.float64)

    def step_loss(idx):
        bundle = forward(model, images[idx])
        cls = D.bce_classification_loss(bundle.probs, labels[idx])
        return cls, None, cls

    start = time.perf_counter()
    log = _run(config, model, images, step_loss, [])
    report = evaluate(model, val_images, val_labels)
    report.seed = config.seed
    report.method = "teacher"
    report.config_hash = config_hash(config.to_dict())
    report.wall_time_s = time.perf_counter() - start
    model.set_requires_grad(False)
    return TrainResult(model, report, log)


def train_student(
    config: TrainConfig,
    teacher: Model | TeacherKnowledge,
    images: np.ndarray,
    labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
) -> TrainResult:
    """Fit a student on ``labels`` plus ``lambda`` times the configured distillation term.

    ``teacher`` may be a frozen model or precomputed :class:`TeacherKnowledge`
    for ``images``; the teacher is never updated.
    """
    method = config.method
    num_classes = labels.shape[1]
    know = teacher if isinstance(teacher, TeacherKnowledge) else TeacherKnowledge.compute(teacher, images)
    if know.logits.shape != (len(images), num_classes):
        raise ValueError(
            f"teacher knowledge covers {know.logits.shape}, expected ({len(images)}, {num_classes})"
        )
    hw = config.patch_grid[0] * config.patch_grid[1]
    if know.feature_maps.shape[1] != hw:
        raise ValueError(f"teacher spatial size {know.feature_maps.shape[1]} != student spatial size {hw}")

    model = init_model(num_classes, config.widths, config.patch_grid, config.patch_px, seed=config.seed, stream=2)
    adapter = None
    extra: list[Tensor] = []
    if method.needs_adapter:
        adapter = ChannelAdapter.create(config.widths[-1], know.feature_maps.shape[-1], seed=config.seed)
        extra = [adapter.weight]

    targets = np.asarray(labels, dtype=np.float64)
    if method.kind is Method.HARD_TARGET:
        targets = D.build_hard_targets(labels, know.probs, method.threshold).astype(np.float64)

    lam = method.weight
    kind = method.kind

    def step_loss(idx):
        s = forward(model, images[idx], tau=method.tau)
        cls = D.bce_classification_loss(s.probs, targets[idx])
        if kind is Method.SOFT_TARGET:
            dl = D.kd_soft_target_loss(know.logits[idx], s.logits, method.tau)
        elif kind is Method.FEATURE:
            dl = D.feature_loss(know.feature[idx], s.feature, adapter)
        elif kind is Method.FEATURE_MAPS:
            dl = D.feature_maps_loss(know.feature_maps[idx], s.feature_maps, adapter)
        elif kind is Method.ATTENTION_MAP:
            dl = D.attention_loss(know.attention[idx], s.attention, normalize=not method.raw_attention)
        elif kind is Method.CAMS:
            dl = D.cams_loss(know.cams[idx], s.cams, know.probs[idx], method.use_teacher_prob)
        else:
            dl = None
        return cls, dl, D.total_loss(cls, dl, lam)

    start = time.perf_counter()
    log = _run(config, model, images, step_loss, extra)
    report = evaluate(model, val_images, val_labels)
    report.seed = config.seed
    report.method = method.label
    report.config_hash = config_hash(config.to_dict())
    report.wall_time_s = time.perf_counter() - start
    model.set_requires_grad(False)
    if adapter is not None:
        adapter.weight.requires_grad = False
    return TrainResult(model, report, log, adapter)


def with_method(config: TrainConfig, method: DistillMethod) -> TrainConfig:
    return replace(config, method=method)
