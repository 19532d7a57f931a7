import json

import numpy as np
import pytest
from conftest import params_bytes

from mlkd.distill import DistillMethod, Method
from mlkd.model import STUDENT_WIDTHS, init_model, save_model
from mlkd.tensor import Tensor
from mlkd.trainer import (
    AdamState,
    TeacherKnowledge,
    TrainConfig,
    TrainingAborted,
    adam_step,
    config_hash,
    teacher_config,
    train_student,
    train_teacher,
)


class TestAdam:
    def test_zero_grad_without_decay_is_fixed_point(self):
        p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        for _ in range(3):
            adam_step([p], [np.zeros(2)], state, lr=0.1)
        assert p.data.tolist() == [1.5, -2.0]

    def test_first_step_moves_by_lr(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        adam_step([p], [np.array([1.0])], AdamState.zeros_like([p]), lr=0.1, betas=(0.9, 0.999))
        # both bias-corrected moments equal 1 after one step
        assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_decoupled_decay_shrinks_geometrically(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        state = AdamState.zeros_like([p])
        for _ in range(4):
            adam_step([p], [np.zeros(1)], state, lr=0.1, weight_decay=0.5)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05) ** 4, rel=1e-14)

    def test_non_finite_gradient_aborts(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(TrainingAborted):
            adam_step([p], [np.array([np.nan])], AdamState.zeros_like([p]), lr=0.1)


class TestConfig:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)

    def test_round_trip(self):
        cfg = TrainConfig(epochs=3, method=DistillMethod(Method.CAMS, lam=2.0))
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_hash_is_stable(self):
        assert config_hash(TrainConfig().to_dict()) == config_hash(TrainConfig().to_dict())
        assert config_hash(TrainConfig().to_dict()) != config_hash(TrainConfig(lr=0.01).to_dict())


class TestTraining:
    def test_teacher_rejects_method(self, tiny_data):
        cfg = teacher_config(epochs=1, method=DistillMethod(Method.CAMS))
        with pytest.raises(ValueError):
            train_teacher(cfg, *tiny_data)

    def test_same_seed_bit_identical_checkpoint(self, tiny_data, tmp_path):
        images, y, vi, vy = tiny_data
        teacher = init_model(6, (8,), seed=1, stream=1)
        cfg = TrainConfig(epochs=2, method=DistillMethod(Method.FEATURE))
        for name in ("a", "b"):
            res = train_student(cfg, teacher, images, y, vi, vy)
            save_model(tmp_path / f"{name}.ckpt", res.model)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_lambda_zero_soft_target_equals_baseline(self, tiny_data):
        images, y, vi, vy = tiny_data
        teacher = init_model(6, (8,), seed=1, stream=1)
        base = train_student(TrainConfig(epochs=2), teacher, images, y, vi, vy)
        st = train_student(
            TrainConfig(epochs=2, method=DistillMethod(Method.SOFT_TARGET, lam=0.0)), teacher, images, y, vi, vy
        )
        assert params_bytes(base.model) == params_bytes(st.model)

    def test_identical_teacher_gives_zero_distill_at_first_step(self, tiny_data):
        images, y, vi, vy = tiny_data
        cfg = TrainConfig(epochs=1, method=DistillMethod(Method.SOFT_TARGET), seed=3)
        twin = init_model(6, STUDENT_WIDTHS, seed=3, stream=2)
        res = train_student(cfg, twin, images, y, vi, vy)
        assert res.log[0]["distill_loss"] == pytest.approx(0.0, abs=1e-12)
        assert res.log[1]["distill_loss"] > 0

    def test_incompatible_knowledge_fails_before_training(self, tiny_data):
        images, y, vi, vy = tiny_data
        know = TeacherKnowledge.compute(init_model(6, (8,), seed=0), images[:10])
        with pytest.raises(ValueError, match="teacher knowledge"):
            train_student(TrainConfig(epochs=1), know, images, y, vi, vy)
        other_grid = init_model(6, (8,), patch_grid=(2, 2), patch_px=16)
        with pytest.raises(ValueError, match="spatial"):
            train_student(TrainConfig(epochs=1), other_grid, images, y, vi, vy)

    def test_non_finite_input_aborts_with_diagnostics(self, tiny_data):
        images, y, vi, vy = tiny_data
        images = images.copy()
        images[:] = np.nan
        with pytest.raises(TrainingAborted, match=r"gradient at epoch 0, batch 0.*cls_loss"):
            train_student(TrainConfig(epochs=1), init_model(6, (8,)), images, y, vi, vy)

    def test_non_finite_loss_aborts_with_components(self, tiny_data):
        images, y, vi, vy = tiny_data
        know = TeacherKnowledge.compute(init_model(6, (8,)), images)
        know.logits[:] = np.nan
        cfg = TrainConfig(epochs=1, method=DistillMethod(Method.SOFT_TARGET))
        with pytest.raises(TrainingAborted, match=r"loss at epoch 0, batch 0.*distill_loss=nan"):
            train_student(cfg, know, images, y, vi, vy)

    def test_log_written_as_jsonl(self, tiny_data, tmp_path):
        images, y, vi, vy = tiny_data
        res = train_student(TrainConfig(epochs=1, batch_size=16), init_model(6, (8,)), images, y, vi, vy)
        res.save_log(tmp_path / "log.jsonl")
        rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert len(rows) == 4
        assert set(rows[0]) == {"step", "epoch", "cls_loss", "distill_loss", "total"}


class TestDefaultRecipe:
    def test_teacher_reaches_high_map(self, default_teacher):
        print(f"default teacher val mAP {default_teacher.report.map:.4f}")
        assert default_teacher.report.map > 0.95

    def test_cams_distill_term_falls_during_first_epoch(self, default_data, default_teacher):
        images, y_full, val_images, val_labels = default_data
        know = TeacherKnowledge.compute(default_teacher.model, images)
        falls = 0
        for seed in range(5):
            cfg = TrainConfig(epochs=1, seed=seed, method=DistillMethod(Method.CAMS))
            curve = [row["distill_loss"] for row in train_student(cfg, know, images, y_full, val_images, val_labels).log]
            head, tail = np.mean(curve[:10]), np.mean(curve[-10:])
            falls += tail < head
        assert falls >= 4
