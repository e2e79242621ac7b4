"""Knowledge distillation: a frozen teacher guides the compressed student.

The objective mixes hard-label cross entropy with a softened KL term,
loss = alpha * CE + (1 - alpha) * KL(softmax(z_t / T) || softmax(z_s / T)),
defaults T = 2 and alpha = 0.5. No T^2 correction factor is applied to the
KL term; common practice differs, so it stays a documented knob rather
than a hidden rescale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ModelState, forward
from .pruning import FineTuneConfig, TrainingDivergedError, _epoch_batches, _trainable_params
from .tensor import Adam, Tensor, add, backward, cross_entropy, kl_divergence, scale, zero_grads


class DistillError(Exception):
    pass


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    alpha: float = 0.5
    train: FineTuneConfig = FineTuneConfig(epochs=4)  # fine-tune budget x 2

    def __post_init__(self):
        if self.temperature <= 0:
            raise DistillError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DistillError(f"alpha must be in [0, 1], got {self.alpha}")


def kd_loss(teacher_logits, student_logits: Tensor, temperature: float = 2.0) -> Tensor:
    """Mean KL(softmax(z_t/T) || softmax(z_s/T)) over the batch.

    The teacher side is a constant; gradients flow to the student only.
    """
    if not isinstance(teacher_logits, Tensor):
        teacher_logits = Tensor(np.asarray(teacher_logits, dtype=np.float64))
    return kl_divergence(teacher_logits, student_logits, temperature)


def combined_loss(ce: Tensor, kd: Tensor, alpha: float) -> Tensor:
    """Exact convex combination alpha * ce + (1 - alpha) * kd."""
    if not 0.0 <= alpha <= 1.0:
        raise DistillError(f"alpha must be in [0, 1], got {alpha}")
    return add(scale(ce, alpha), scale(kd, 1.0 - alpha))


def _same_family(a: ModelState, b: ModelState) -> bool:
    ca = replace(a.config, seed=0)
    cb = replace(b.config, seed=0)
    return ca == cb


@dataclass
class DistillResult:
    student: ModelState
    final_loss: float
    loss_curve: list[float]


def distill_train(
    teacher: ModelState,
    student: ModelState,
    samples,
    config: DistillConfig = DistillConfig(),
) -> DistillResult:
    """Train the student against the frozen teacher, in place.

    Per batch: teacher forward without gradients, student forward, combined
    loss, student-only Adam update. Batch order matches fine_tune exactly
    for the same seed, so alpha = 1 reproduces plain cross-entropy training
    bit for bit.
    """
    if not _same_family(teacher, student):
        raise DistillError("teacher and student configs are from different families")
    if not student.live_layers():
        raise DistillError("student has no live layers")
    if not samples:
        raise DistillError("distill_train: no training samples")

    train = config.train
    rng = np.random.default_rng(train.seed)
    adam = Adam(_trainable_params(student), lr=train.lr)
    curve: list[float] = []
    max_len = student.config.max_seq_len
    for epoch in range(train.epochs):
        for step, batch in enumerate(_epoch_batches(samples, train.batch_size, max_len, rng)):
            teacher_logits = forward(teacher, batch)[0].data  # detached constant
            zero_grads(student.params)
            student_logits, _ = forward(student, batch)
            ce = cross_entropy(student_logits, batch.labels)
            kd = kd_loss(teacher_logits, student_logits, config.temperature)
            loss = combined_loss(ce, kd, config.alpha)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"distill_train: non-finite loss at epoch {epoch} step {step}"
                )
            backward(loss)
            adam.step()
            curve.append(value)
    return DistillResult(student, curve[-1], curve)
