"""Finite-difference checks for every loss against the tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import distill as D
from .model import ClassifierHead, extract_attention, extract_cams
from .tensor import Tensor, finite_difference_check

TOLERANCE = 1e-4


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One random instance per (loss, student-side input) pair."""
    k, hw, c_s, c_t = 4, 6, 3, 5
    p = rng.uniform(0.05, 0.95, size=k)
    y = (rng.random(k) < 0.5).astype(float)
    z_t = rng.normal(0, 2, size=k)
    z_s = rng.normal(0, 2, size=k)
    tau = float(rng.uniform(1.0, 4.0))
    f_t = rng.normal(size=c_t)
    f_s = rng.normal(size=c_s)
    x_t = rng.normal(size=(hw, c_t))
    x_s = rng.normal(size=(hw, c_s))
    adapter_w = rng.normal(size=(c_s, c_t))
    a_t = rng.uniform(0.1, 2.0, size=hw)
    a_s = rng.uniform(0.1, 2.0, size=hw)
    m_t = rng.normal(size=(k, hw))
    m_s = rng.normal(size=(k, hw))
    p_t = rng.uniform(0.01, 0.99, size=k)
    head_w = rng.normal(size=(c_s, k))
    head = ClassifierHead(Tensor(head_w), Tensor(np.zeros(k)))
    x_t_maps = rng.normal(size=(hw, c_s))

    def adapter(w):
        return D.ChannelAdapter(w)

    fixed_adapter = D.ChannelAdapter(Tensor(adapter_w))
    return {
        "bce": (lambda t: D.bce_classification_loss(t, y), p),
        "kd_soft_target": (lambda t: D.kd_soft_target_loss(z_t, t, tau), z_s),
        "feature/student_feature": (lambda t: D.feature_loss(f_t, t, fixed_adapter), f_s),
        "feature/adapter": (lambda t: D.feature_loss(f_t, Tensor(f_s), adapter(t)), adapter_w),
        "feature_maps/student_maps": (lambda t: D.feature_maps_loss(x_t, t, fixed_adapter), x_s),
        "feature_maps/adapter": (lambda t: D.feature_maps_loss(x_t, Tensor(x_s), adapter(t)), adapter_w),
        "attention/normalized": (lambda t: D.attention_loss(a_t, t), a_s),
        "attention/raw": (lambda t: D.attention_loss(a_t, t, normalize=False), a_s),
        "attention/via_feature_maps": (
            lambda t: D.attention_loss(extract_attention(Tensor(x_t_maps)), extract_attention(t)), x_s,
        ),
        "cams/weighted": (lambda t: D.cams_loss(m_t, t, p_t, True), m_s),
        "cams/unweighted": (lambda t: D.cams_loss(m_t, t, p_t, False), m_s),
        "cams/via_feature_maps": (lambda t: D.cams_loss(m_t, extract_cams(t, head), p_t, True), x_s),
        "total/lambda0": (
            lambda t: D.total_loss(D.bce_classification_loss(t.sigmoid(), y), D.kd_soft_target_loss(z_t, t, tau), 0.0),
            z_s,
        ),
    }


def gradient_suite(n_instances: int = 20, seed: int = 0, eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per check over ``n_instances`` seeded random instances."""
    worst: dict[str, float] = {}
    for i in range(n_instances):
        rng = np.random.default_rng([seed, i])
        for name, (f, x) in _cases(rng).items():
            err = finite_difference_check(f, x, eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
