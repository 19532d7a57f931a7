"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The experiment-matrix criteria share one full default run (about ten minutes
on a single core); the determinism criterion repeats it from scratch.
"""

import time

import numpy as np
import pytest
from conftest import params_bytes
from oracles import pr_area_ap

from mlkd.distill import DistillMethod, Method
from mlkd.gradcheck import TOLERANCE, gradient_suite
from mlkd.heatmaps import emit_heatmaps, load_map
from mlkd.matrix import SINGLE, ExperimentMatrix, medians, run_matrix
from mlkd.metrics import average_precision
from mlkd.model import forward, init_model, load_model, save_model
from mlkd.synthgen import DatasetSpec, corrupt_missing, generate, stack
from mlkd.tensor import Tensor
from mlkd.trainer import TrainConfig, train_student

MATRIX_BUDGET_S = 15 * 60


@pytest.fixture
def verdict(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
        assert ok, detail

    return emit


@pytest.fixture(scope="session")
def matrix_run(tmp_path_factory):
    matrix = ExperimentMatrix()
    out = tmp_path_factory.mktemp("matrix")
    start = time.perf_counter()
    csv_text, results = run_matrix(matrix, out)
    elapsed = time.perf_counter() - start
    return {"matrix": matrix, "out": out, "csv": csv_text, "results": results, "elapsed": elapsed,
            "medians": medians(results)}


def test_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst = gradient_suite(n_instances=20, seed=0)
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= TOLERANCE and elapsed < 30
    verdict(1, ok, f"{len(worst)} checks, worst {name} rel err {err:.2e} (<= {TOLERANCE}), {elapsed:.1f}s (< 30s)")


def test_2_cam_gap_commutation(verdict):
    start = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([2, i])
        widths = tuple(int(w) for w in rng.integers(1, 24, size=rng.integers(1, 4)))
        model = init_model(int(rng.integers(2, 9)), widths, seed=i)
        model.head.bias.data[:] = rng.normal(size=model.head.num_classes)
        b = forward(model, rng.random((32, 32)))
        gap = b.cams.data.mean(axis=-1) + model.head.bias.data
        worst = max(worst, float(np.max(np.abs(gap - b.logits.data))))
    elapsed = time.perf_counter() - start
    verdict(2, worst <= 1e-9 and elapsed < 5, f"max |mean(M_k) + b_k - z_k| = {worst:.2e} over 100 pairs, {elapsed:.2f}s")


def test_3_ap_oracle_equivalence(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = compared = 0
    for trial in range(1000):
        n = int(rng.integers(1, 13))
        # every other trial draws coarse scores so ties are exercised
        scores = rng.integers(0, 4, size=n) / 3 if trial % 2 else rng.random(n)
        labels = rng.random(n) < 0.5
        ap = average_precision(scores, labels)
        ref = pr_area_ap(list(scores), list(labels), tiebreak_by_index=True)
        compared += ref is not None
        mismatches += ap != ref
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    verdict(3, ok, f"{mismatches} mismatches in 1000 trials ({compared} with positives), {elapsed:.2f}s")


def test_4_corruption_statistics(verdict):
    train, _ = generate(DatasetSpec(n_train=4000, n_val=0, seed=4))
    _, y_full, _ = stack(train)
    n_pos, r = int(y_full.sum()), 0.75
    kept = int(stack(corrupt_missing(train, r, seed=4))[2].sum())
    sigma = np.sqrt(n_pos * r * (1 - r))
    lo, hi = n_pos * r - 3 * sigma, n_pos * r + 3 * sigma
    in_band = n_pos >= 10_000 and lo <= kept <= hi

    subset = train[:1000]
    levels = [stack(corrupt_missing(subset, ratio, seed=9))[2] for ratio in (1.0, 0.75, 0.40)]
    nested = np.array_equal(levels[0], stack(subset)[1]) and all(
        np.all(b <= a) for a, b in zip(levels, levels[1:])
    )
    verdict(4, in_band and nested,
            f"kept {kept}/{n_pos} in [{lo:.0f}, {hi:.0f}]; subsets nested for r=1.0>0.75>0.40: {nested}")


def test_5_baseline_identity(verdict, default_data, default_teacher, tmp_path):
    images, y_full, val_images, val_labels = default_data
    base = train_student(TrainConfig(seed=5), default_teacher.model, images, y_full, val_images, val_labels)
    st_cfg = TrainConfig(seed=5, method=DistillMethod(Method.SOFT_TARGET, lam=0.0))
    soft = train_student(st_cfg, default_teacher.model, images, y_full, val_images, val_labels)
    save_model(tmp_path / "none.ckpt", base.model)
    save_model(tmp_path / "soft0.ckpt", soft.model)
    same = (tmp_path / "none.ckpt").read_bytes() == (tmp_path / "soft0.ckpt").read_bytes()
    same_params = params_bytes(base.model) == params_bytes(soft.model)
    verdict(5, same and same_params, f"checkpoints byte-identical: {same}")


def test_6_matrix_runtime(verdict, matrix_run):
    n = len(matrix_run["results"])
    failed = sum(1 for c in matrix_run["results"] if c.error)
    ok = matrix_run["elapsed"] < MATRIX_BUDGET_S and failed == 0 and n == 4 * 7 * 5
    verdict("6", ok, f"{n} cells ({failed} failed) in {matrix_run['elapsed']:.0f}s (< {MATRIX_BUDGET_S}s)")


def test_6a_full_label_ordering(verdict, matrix_run):
    med = matrix_run["medians"]
    cams, att, none = (med[("1.0", m)] for m in ("cams", "attention_map", "none"))
    verdict("6a", cams > att > none, f"full-label medians cams {cams:.4f} > attention {att:.4f} > none {none:.4f}")


def test_6b_soft_target_gain_grows_with_missing_labels(verdict, matrix_run):
    med = matrix_run["medians"]
    gain_full = med[("1.0", "soft_target")] - med[("1.0", "none")]
    gain_single = med[(SINGLE, "soft_target")] - med[(SINGLE, "none")]
    ok = gain_single > 0 and gain_single >= 2 * gain_full
    verdict("6b", ok, f"soft-target gain single {gain_single:+.4f} vs full {gain_full:+.4f} (need >= 2x and > 0)")


def test_6c_hard_target_single_label(verdict, matrix_run):
    med = matrix_run["medians"]
    hard, soft, none = (med[(SINGLE, m)] for m in ("hard_target", "soft_target", "none"))
    ok = hard > none and abs(hard - soft) <= 0.03
    verdict("6c", ok, f"single-label hard {hard:.4f} > none {none:.4f}; |hard - soft {soft:.4f}| = {abs(hard - soft):.4f} <= 0.03")


def test_6d_teacher_prob_weighting(verdict, matrix_run):
    med = matrix_run["medians"]
    weighted, plain = med[("1.0", "cams")], med[("1.0", "cams_no_tea_prob")]
    verdict("6d", weighted >= plain, f"full-label cams {weighted:.4f} >= cams w/o teacher prob {plain:.4f}")


def test_7_matrix_determinism(verdict, matrix_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix_rerun")
    csv_text, _ = run_matrix(matrix_run["matrix"], out)
    first = (matrix_run["out"] / "aggregate.csv").read_bytes()
    same = (out / "aggregate.csv").read_bytes() == first and csv_text == matrix_run["csv"]
    verdict(7, same, f"independent rerun aggregate.csv byte-identical: {same} ({len(first)} bytes)")


def _first_two_class_image(teacher, val_images):
    probs = forward(teacher, val_images).probs.data
    for idx in range(len(val_images)):
        confident = np.flatnonzero(probs[idx] >= 0.9)
        if confident.size >= 2:
            top = confident[np.argsort(-probs[idx][confident], kind="stable")[:2]]
            return idx, top
    return None, None


def test_8_heatmap_round_trip_and_decoupling(verdict, matrix_run, tmp_path):
    worst_ratio = 0.0
    decoupled = []
    for seed in matrix_run["matrix"].seeds:
        # at ratio 1.0 the corrupted-label teacher is the default full-label recipe
        (ckpt,) = (matrix_run["out"] / "teachers").glob(f"teacher_1.0_seed{seed}_*.ckpt")
        teacher = load_model(ckpt)
        _, val = generate(DatasetSpec(seed=seed))
        val_images = np.stack([e.image for e in val])
        idx, (k1, k2) = _first_two_class_image(teacher, val_images)
        written = emit_heatmaps(teacher, val_images, [idx], tmp_path / f"s{seed}")
        cams = forward(teacher, val_images[idx]).cams.data
        for path in written:
            if "_cam_k" not in path.name:
                continue
            k = int(path.name.split("_cam_k")[1].split("_")[0])
            truth = cams[k].reshape(4, 4)
            span = truth.max() - truth.min()
            worst_ratio = max(worst_ratio, float(np.max(np.abs(load_map(path) - truth)) / span * 255))
        decoupled.append(int(np.argmax(cams[k1])) != int(np.argmax(cams[k2])))
    ok = worst_ratio <= 1.0 and sum(decoupled) >= 4
    verdict(8, ok, f"max CAM reconstruction error {worst_ratio:.3f}/255 of range; "
                   f"CAM argmax cells differ in {sum(decoupled)}/5 seeds")
