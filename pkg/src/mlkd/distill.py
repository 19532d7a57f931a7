"""Classification and distillation losses, channel adapters and Hard Target labels.

All losses accept either a single example or a batch with leading axes; the
per-example value is computed over the trailing axes and then averaged over
the batch. Teacher-side inputs may be numpy arrays or tensors and are always
treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import ShapeError, Tensor

EPS = 1e-7


class Method(str, Enum):
    NONE = "none"
    SOFT_TARGET = "soft_target"
    HARD_TARGET = "hard_target"
    FEATURE = "feature"
    FEATURE_MAPS = "feature_maps"
    ATTENTION_MAP = "attention_map"
    CAMS = "cams"


DEFAULT_LAMBDA = {
    Method.NONE: 0.0,
    Method.SOFT_TARGET: 1.0,
    Method.HARD_TARGET: 0.0,
    Method.FEATURE: 10.0,
    Method.FEATURE_MAPS: 10.0,
    Method.ATTENTION_MAP: 100.0,
    Method.CAMS: 10.0,
}
DEFAULT_TAU = 2.0
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class DistillMethod:
    """Which knowledge is transferred, and with what weight.

    ``lam`` is ignored for ``none`` and ``hard_target``: the latter swaps the
    supervision for teacher-augmented labels and adds no distillation term.
    """

    kind: Method = Method.NONE
    lam: float | None = None
    tau: float = DEFAULT_TAU
    threshold: float = DEFAULT_THRESHOLD
    use_teacher_prob: bool = True
    raw_attention: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Method(self.kind))
        if self.lam is None:
            object.__setattr__(self, "lam", DEFAULT_LAMBDA[self.kind])
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def weight(self) -> float:
        if self.kind in (Method.NONE, Method.HARD_TARGET):
            return 0.0
        return float(self.lam)

    @property
    def needs_adapter(self) -> bool:
        return self.kind in (Method.FEATURE, Method.FEATURE_MAPS)

    @property
    def label(self) -> str:
        """Short stable name used in reports and CSV rows."""
        if self.kind is Method.CAMS and not self.use_teacher_prob:
            return "cams_no_tea_prob"
        if self.kind is Method.ATTENTION_MAP and self.raw_attention:
            return "attention_map_raw"
        return self.kind.value

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "lambda": self.lam,
            "tau": self.tau,
            "threshold": self.threshold,
            "use_teacher_prob": self.use_teacher_prob,
            "raw_attention": self.raw_attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DistillMethod:
        d = dict(d)
        kind = d.pop("kind", d.pop("name", "none"))
        if kind == "cams_no_tea_prob":
            kind, d["use_teacher_prob"] = "cams", False
        lam = d.pop("lambda", d.pop("lam", None))
        allowed = {"tau", "threshold", "use_teacher_prob", "raw_attention"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown method fields: {sorted(unknown)}")
        return cls(kind=Method(kind), lam=lam, **d)


@dataclass
class ChannelAdapter:
    """Learned ``[C_student, C_teacher]`` linear map applied along the channel axis."""

    weight: Tensor = field(repr=False)

    @classmethod
    def create(cls, c_student: int, c_teacher: int, seed: int = 0) -> ChannelAdapter:
        if c_student == c_teacher:
            w = np.eye(c_student)
        else:
            rng = np.random.default_rng([seed, 0xAD])
            w = rng.normal(0.0, 1.0 / np.sqrt(c_student), size=(c_student, c_teacher))
        return cls(Tensor(w, requires_grad=True))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise ShapeError(
                f"adapter: input has {x.shape[-1]} channels, adapter expects {self.in_channels}"
            )
        if x.ndim == 1:
            return (x.reshape(1, -1) @ self.weight).reshape(-1)
        return x @ self.weight


def _const(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _batch_mean(per_example: Tensor) -> Tensor:
    return per_example.mean() if per_example.ndim else per_example


def _xlogx(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def _check_same(op: str, a: tuple, b: tuple) -> None:
    if a != b:
        raise ShapeError(f"{op}: shape mismatch {a} vs {b}")


def bce_classification_loss(p: Tensor, y) -> Tensor:
    """Mean over classes of binary cross-entropy on clamped probabilities."""
    y = _const(y)
    _check_same("bce_classification_loss", p.shape, y.shape)
    pc = p.clip(EPS, 1.0 - EPS)
    per = -(pc.log() * y + (1.0 - pc).log() * (1.0 - y))
    return _batch_mean(per.mean(axis=-1))


def kd_soft_target_loss(z_teacher, z_student: Tensor, tau: float) -> Tensor:
    """``tau**2 * sum_k KL(Bernoulli(T_k) || Bernoulli(S_k))`` on temperature-softened sigmoids."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    zt = _const(z_teacher)
    _check_same("kd_soft_target_loss", zt.shape, z_student.shape)
    t = 1.0 / (1.0 + np.exp(-zt / tau))
    s = (z_student * (1.0 / tau)).sigmoid().clip(EPS, 1.0 - EPS)
    neg_entropy = _xlogx(t) + _xlogx(1.0 - t)
    cross = s.log() * t + (1.0 - s).log() * (1.0 - t)
    per = (neg_entropy - cross).sum(axis=-1) * (tau * tau)
    return _batch_mean(per)


def feature_loss(f_teacher, f_student: Tensor, adapter: ChannelAdapter) -> Tensor:
    """MSE between the pooled teacher feature and the adapted student feature."""
    ft = _const(f_teacher)
    if adapter.out_channels != ft.shape[-1]:
        raise ShapeError(
            f"feature_loss: adapter outputs {adapter.out_channels} channels, teacher has {ft.shape[-1]}"
        )
    diff = adapter(f_student) - ft
    return _batch_mean(diff.square().mean(axis=-1))


def feature_maps_loss(x_teacher, x_student: Tensor, adapter: ChannelAdapter) -> Tensor:
    """MSE over all ``HW x C_teacher`` entries of teacher maps vs adapted student maps."""
    xt = _const(x_teacher)
    if xt.shape[-2] != x_student.shape[-2]:
        raise ShapeError(
            f"feature_maps_loss: spatial sizes differ ({xt.shape[-2]} vs {x_student.shape[-2]})"
        )
    if adapter.out_channels != xt.shape[-1]:
        raise ShapeError(
            f"feature_maps_loss: adapter outputs {adapter.out_channels} channels, teacher has {xt.shape[-1]}"
        )
    diff = adapter(x_student) - xt
    return _batch_mean(diff.square().mean(axis=(-2, -1)))


def _l2_normalize_const(a: np.ndarray) -> np.ndarray:
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    return np.divide(a, norm, out=np.zeros_like(a), where=norm > 0)


def attention_loss(a_teacher, a_student: Tensor, normalize: bool = True) -> Tensor:
    """MSE between (by default L2-normalised) attention vectors over spatial positions."""
    at = _const(a_teacher)
    if at.shape[-1] != a_student.shape[-1]:
        raise ShapeError(f"attention_loss: spatial sizes differ ({at.shape[-1]} vs {a_student.shape[-1]})")
    _check_same("attention_loss", at.shape, a_student.shape)
    if normalize:
        at = _l2_normalize_const(at)
        # clamp before sqrt so an all-zero map stays zero with a finite gradient
        norm = a_student.square().sum(axis=-1, keepdims=True).clip(1e-24).sqrt()
        a_student = a_student / norm
    diff = a_student - at
    return _batch_mean(diff.square().mean(axis=-1))


def cams_loss(m_teacher, m_student: Tensor, p_teacher, use_teacher_prob: bool = True) -> Tensor:
    """``sum_k w_k * mean_hw (M_T[k] - M_S[k])**2`` with ``w_k`` the teacher probability or 1."""
    mt = _const(m_teacher)
    _check_same("cams_loss", mt.shape, m_student.shape)
    per_class = (m_student - mt).square().mean(axis=-1)
    if use_teacher_prob:
        pt = _const(p_teacher)
        _check_same("cams_loss (teacher probabilities)", pt.shape, mt.shape[:-1])
        per_class = per_class * pt
    return _batch_mean(per_class.sum(axis=-1))


def build_hard_targets(y_obs, p_teacher, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Observed positives unioned with teacher predictions at or above ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    y = np.asarray(y_obs)
    p = _const(p_teacher)
    _check_same("build_hard_targets", y.shape, p.shape)
    return ((y > 0) | (p >= threshold)).astype(y.dtype if y.dtype != bool else np.uint8)


def total_loss(cls_loss: Tensor, distill_loss: Tensor | None, lam: float) -> Tensor:
    """``cls + lam * distill``; at ``lam == 0`` the distill term is left out of the graph."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0 or distill_loss is None:
        return cls_loss
    return cls_loss + distill_loss * lam
