import math

import numpy as np
import numpy.testing as npt
import pytest

from prunefuse.data import DatasetSpec, generate_corpus, batches_of
from prunefuse.distill import (
    DistillConfig,
    DistillError,
    combined_loss,
    distill_train,
    kd_loss,
)
from prunefuse.model import ModelConfig, evaluate_accuracy, init_model
from prunefuse.pruning import FineTuneConfig, fine_tune
from prunefuse.tensor import Tensor


class TestKdLoss:
    def test_identical_logits_give_zero(self):
        z = np.random.default_rng(0).normal(size=(5, 4))
        loss = kd_loss(z, Tensor(z), temperature=2.0)
        npt.assert_allclose(loss.item(), 0.0, atol=1e-15)

    def test_hand_computed_value(self):
        # teacher softened to [0.75, 0.25], student uniform:
        # 0.75*ln(1.5) + 0.25*ln(0.5) = 0.13081...
        T = 2.0
        zt = np.array([[T * math.log(3.0), 0.0]])
        zs = Tensor(np.zeros((1, 2)))
        loss = kd_loss(zt, zs, temperature=T)
        npt.assert_allclose(loss.item(), 0.1308120359, atol=1e-6)

    def test_huge_temperature_flattens(self):
        zt = np.array([[3.0, -1.0, 0.5]])
        zs = Tensor(np.array([[0.0, 2.0, -2.0]]))
        loss = kd_loss(zt, zs, temperature=1e6)
        assert loss.item() < 1e-9

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            zt = rng.normal(size=(3, 5)) * 4
            zs = Tensor(rng.normal(size=(3, 5)) * 4)
            assert kd_loss(zt, zs, temperature=2.0).item() >= 0.0

    def test_shape_mismatch_rejected(self):
        from prunefuse.tensor import ShapeMismatchError

        with pytest.raises(ShapeMismatchError):
            kd_loss(np.zeros((2, 3)), Tensor(np.zeros((2, 4))), 2.0)


class TestCombinedLoss:
    def test_alpha_one_is_ce_only(self):
        out = combined_loss(Tensor(0.7), Tensor(123.0), alpha=1.0)
        npt.assert_allclose(out.item(), 0.7)

    def test_alpha_zero_is_kd_only(self):
        out = combined_loss(Tensor(123.0), Tensor(0.2), alpha=0.0)
        npt.assert_allclose(out.item(), 0.2)

    def test_midpoint(self):
        out = combined_loss(Tensor(0.4), Tensor(0.2), alpha=0.5)
        npt.assert_allclose(out.item(), 0.3)

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(DistillError):
            combined_loss(Tensor(0.1), Tensor(0.1), alpha=1.5)

    def test_monotone_in_each_argument(self):
        base = combined_loss(Tensor(0.4), Tensor(0.2), alpha=0.3).item()
        assert combined_loss(Tensor(0.5), Tensor(0.2), alpha=0.3).item() > base
        assert combined_loss(Tensor(0.4), Tensor(0.3), alpha=0.3).item() > base


class TestDistillConfig:
    def test_defaults_match_declared_protocol(self):
        cfg = DistillConfig()
        assert cfg.temperature == 2.0 and cfg.alpha == 0.5

    def test_invalid_temperature(self):
        with pytest.raises(DistillError):
            DistillConfig(temperature=0.0)

    def test_invalid_alpha(self):
        with pytest.raises(DistillError):
            DistillConfig(alpha=-0.1)


@pytest.fixture(scope="module")
def distill_world():
    spec = DatasetSpec(n_classes=4, n_train=256, n_val=64, n_test=96, seed=17)
    splits = generate_corpus(spec)
    teacher = init_model(ModelConfig(n_classes=4, seed=23))
    fine_tune(teacher, splits.train, FineTuneConfig(epochs=2, seed=3))
    return splits, teacher


class TestDistillTrain:
    def test_teacher_bit_identical_after_training(self, distill_world):
        splits, teacher = distill_world
        before = {k: v.data.copy() for k, v in teacher.params.items()}
        student = teacher.copy()
        student.prune_mask[4] = True
        distill_train(teacher, student, splits.train[:64],
                      DistillConfig(train=FineTuneConfig(epochs=1, seed=5)))
        for k, v in teacher.params.items():
            npt.assert_array_equal(v.data, before[k])

    def test_same_seed_identical_student(self, distill_world):
        splits, teacher = distill_world
        cfg = DistillConfig(train=FineTuneConfig(epochs=1, seed=6))
        a = teacher.copy(); a.prune_mask[2] = True
        b = teacher.copy(); b.prune_mask[2] = True
        distill_train(teacher, a, splits.train[:64], cfg)
        distill_train(teacher, b, splits.train[:64], cfg)
        for k in a.params:
            npt.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_exact_copy_student_alpha_zero_starts_at_zero_loss(self, distill_world):
        splits, teacher = distill_world
        student = teacher.copy()
        result = distill_train(
            teacher, student, splits.train[:32],
            DistillConfig(alpha=0.0, train=FineTuneConfig(epochs=1, lr=0.0, seed=7)),
        )
        npt.assert_allclose(result.loss_curve[0], 0.0, atol=1e-12)
        for k, v in student.params.items():
            npt.assert_array_equal(v.data, teacher.params[k].data)

    def test_alpha_one_reproduces_plain_fine_tune(self, distill_world):
        splits, teacher = distill_world
        a = teacher.copy(); a.prune_mask[3] = True
        b = teacher.copy(); b.prune_mask[3] = True
        train_cfg = FineTuneConfig(epochs=1, seed=8)
        distilled = distill_train(teacher, a, splits.train[:64],
                                  DistillConfig(alpha=1.0, train=train_cfg))
        tuned = fine_tune(b, splits.train[:64], train_cfg)
        npt.assert_array_equal(np.array(distilled.loss_curve), np.array(tuned.loss_curve))
        for k in a.params:
            npt.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_config_family_mismatch_rejected(self, distill_world):
        splits, teacher = distill_world
        student = init_model(ModelConfig(n_classes=4, d_model=16, n_heads=2, seed=0))
        with pytest.raises(DistillError, match="famil"):
            distill_train(teacher, student, splits.train[:32], DistillConfig())

    def test_student_needs_live_layers(self, distill_world):
        splits, teacher = distill_world
        student = teacher.copy()
        student.prune_mask = [True] * 12
        with pytest.raises(DistillError, match="live"):
            distill_train(teacher, student, splits.train[:32], DistillConfig())

    def test_distillation_usually_helps_ablated_students(self, distill_world):
        # paired comparison over seeds; threshold frozen after a pilot grid
        splits, teacher = distill_world
        test_batches = batches_of(splits.test, 96)
        rng = np.random.default_rng(29)
        wins = 0
        trials = 10
        for trial in range(trials):
            student = teacher.copy()
            for layer in rng.choice(12, size=4, replace=False):
                student.prune_mask[layer] = True
            acc_before = evaluate_accuracy(student, test_batches)
            distill_train(
                teacher, student, splits.train,
                DistillConfig(train=FineTuneConfig(epochs=2, seed=trial)),
            )
            acc_after = evaluate_accuracy(student, test_batches)
            wins += acc_after >= acc_before
        assert wins >= 7
