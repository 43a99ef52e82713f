"""The epoch loop: seeded shuffling, augmentation, loss, backward, update.

Every step runs augment -> forward -> smoothed weighted cross-entropy ->
backward -> schedule lookup -> optimizer update. Per-epoch train metrics are
accumulated from the training predictions themselves; validation metrics,
when a validation split is given, come from a clean (unaugmented) pass.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import evaluate as ev
from . import tensor as T
from .data import AugmentPolicy, DatasetManifest, batches, augment, sample_rng
from .losses import smoothed_cross_entropy
from .model import ModelGraph
from .optim import Adam, SGD, ScheduleSpec, lr_at, make_optimizer
from .tensor import Tape, Tensor

HISTORY_FIELDS = ("epoch", "split", "loss", "accuracy", "precision", "recall", "lr")


class NumericError(RuntimeError):
    """Training produced a non-finite loss; carries the failing step index."""

    def __init__(self, step: int, epoch: int, detail: str):
        super().__init__(f"non-finite loss at step {step} (epoch {epoch}): {detail}")
        self.step = step
        self.epoch = epoch


@dataclass
class TrainPlan:
    """Everything fit needs beyond the model and the data."""

    epochs: int
    batch_size: int
    seed: int = 0
    smoothing: float = 0.1
    class_weights: np.ndarray | None = None  # None = uniform
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0  # sgd only
    beta1: float = 0.9  # adam only
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: ScheduleSpec | None = None  # None = defaults from the data size
    warmup_epochs: float = 1.0  # used only when schedule is None
    decay_start_fraction: float = 0.8
    decay_factor: float = 0.1
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy.identity)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError(f"smoothing must be in [0, 1), got {self.smoothing}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if (w <= 0).any():
                raise ValueError("class weights must all be positive")
            self.class_weights = w
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")

    def make_optimizer(self) -> Adam | SGD:
        if self.optimizer == "adam":
            return make_optimizer(
                "adam", lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps
            )
        return make_optimizer("sgd", lr=self.lr, momentum=self.momentum)

    def resolve_schedule(self, steps_per_epoch: int) -> ScheduleSpec:
        """Materialize the three-stage schedule against the data size."""
        if self.schedule is not None:
            return self.schedule
        total = max(1, steps_per_epoch * max(self.epochs, 1))
        warmup = max(1, int(round(self.warmup_epochs * steps_per_epoch)))
        decay_start = max(warmup, int(round(self.decay_start_fraction * total)))
        return ScheduleSpec(
            peak_lr=self.lr,
            warmup_steps=warmup,
            decay_start_step=decay_start,
            decay_factor=self.decay_factor,
        )


@dataclass
class EpochStats:
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision: float | None
    recall: float | None
    lr: float

    def row(self) -> list:
        fmt = lambda v: "undefined" if v is None else f"{v:.8g}"
        return [
            self.epoch,
            self.split,
            f"{self.loss:.8g}",
            f"{self.accuracy:.8g}",
            fmt(self.precision),
            fmt(self.recall),
            f"{self.lr:.8g}",
        ]


def _open_sink(log_sink):
    if log_sink is None:
        return None, False
    if hasattr(log_sink, "write"):
        return log_sink, False
    fh = open(log_sink, "w", encoding="utf-8", newline="\n")
    return fh, True


def fit(
    model: ModelGraph,
    manifest: DatasetManifest,
    plan: TrainPlan,
    log_sink=None,
    train_split: str = "train",
    val_split: str | None = None,
) -> list[EpochStats]:
    """Train in place and return the per-epoch history.

    ``log_sink`` is a path or file-like; each history row is appended as CSV
    as soon as its epoch completes. All randomness (shuffles, augmentation)
    derives from plan.seed, so equal seeds give bit-identical parameters.
    """
    n_train = len(manifest.split_records(train_split))
    if n_train == 0:
        raise ValueError(f"training split {train_split!r} is empty")
    if plan.class_weights is not None and len(plan.class_weights) != len(manifest.classes):
        raise ValueError(
            f"{len(plan.class_weights)} class weights for {len(manifest.classes)} classes"
        )

    params = model.parameters()
    optimizer = plan.make_optimizer()
    steps_per_epoch = math.ceil(n_train / plan.batch_size)
    schedule = plan.resolve_schedule(steps_per_epoch)
    weights_t = (
        Tensor(plan.class_weights.astype(model.dtype)) if plan.class_weights is not None else None
    )
    target = model.input_shape[-1]

    sink, owned = _open_sink(log_sink)
    writer = None
    if sink is not None:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)

    history: list[EpochStats] = []
    step = 0
    k = len(manifest.classes)
    try:
        for epoch in range(plan.epochs):
            loss_sum = 0.0
            seen = 0
            cm_counts = np.zeros((k, k), dtype=np.int64)
            lr = lr_at(step, schedule)
            for batch in batches(manifest, train_split, plan.batch_size, plan.seed, epoch, target):
                images = batch.images
                if not _policy_inert(plan.augment_policy):
                    stack = [
                        augment(
                            Tensor(images.data[i]),
                            plan.augment_policy,
                            sample_rng(plan.seed, epoch, int(batch.indices[i])),
                        ).data
                        for i in range(images.shape[0])
                    ]
                    images = Tensor(np.stack(stack))
                if images.dtype != model.dtype:
                    images = images.astype(model.dtype)
                labels = batch.labels.astype(model.dtype)

                tape = Tape()
                probs = model.forward(images, tape)
                if not probs.all_finite():
                    raise NumericError(step, epoch, f"non-finite probabilities, lr={lr:.3g}")
                loss = smoothed_cross_entropy(probs, labels, plan.smoothing, weights_t, tape)
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericError(step, epoch, f"loss={loss_value!r}, lr={lr:.3g}")
                grads, _ = T.backward(tape, loss, params)
                lr = lr_at(step, schedule)
                optimizer.step(params, grads, lr=lr)
                step += 1

                bsz = images.shape[0]
                loss_sum += loss_value * bsz
                seen += bsz
                pred = probs.data.argmax(axis=1)
                act = labels.data.argmax(axis=1)
                np.add.at(cm_counts, (act, pred), 1)

            cm = ev.ConfusionMatrix(cm_counts, manifest.classes)
            macro_p, macro_r = ev.macro_metrics(cm)
            stats = EpochStats(
                epoch=epoch,
                split=train_split,
                loss=loss_sum / seen,
                accuracy=ev.accuracy(cm),
                precision=macro_p,
                recall=macro_r,
                lr=lr,
            )
            history.append(stats)
            if writer is not None:
                writer.writerow(stats.row())

            if val_split is not None:
                report, vcm = ev.evaluate(model, manifest, val_split, plan.batch_size)
                val_loss = _split_loss(model, manifest, val_split, plan)
                vstats = EpochStats(
                    epoch=epoch,
                    split=val_split,
                    loss=val_loss,
                    accuracy=report.accuracy,
                    precision=report.macro_precision,
                    recall=report.macro_recall,
                    lr=lr,
                )
                history.append(vstats)
                if writer is not None:
                    writer.writerow(vstats.row())
            if sink is not None:
                sink.flush()
    finally:
        if owned:
            sink.close()
    return history


def _policy_inert(policy: AugmentPolicy) -> bool:
    return not (
        policy.enable_flip
        or policy.enable_crop
        or policy.enable_brightness
        or policy.enable_contrast
        or policy.enable_saturation
    )


def _split_loss(model: ModelGraph, manifest: DatasetManifest, split: str, plan: TrainPlan) -> float:
    """Mean smoothed weighted CE over a split, without augmentation."""
    weights_t = (
        Tensor(plan.class_weights.astype(model.dtype)) if plan.class_weights is not None else None
    )
    total = 0.0
    seen = 0
    target = model.input_shape[-1]
    for batch in batches(manifest, split, plan.batch_size, seed=0, epoch=0, target=target):
        images = batch.images
        if images.dtype != model.dtype:
            images = images.astype(model.dtype)
        probs = model.forward(images, tape=None)
        loss = smoothed_cross_entropy(probs, batch.labels.astype(model.dtype), plan.smoothing, weights_t)
        bsz = images.shape[0]
        total += loss.item() * bsz
        seen += bsz
    return total / seen


def read_history_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
