"""Sequential teacher-student training over a class-incremental task list.

Per task: snapshot the current model as frozen teacher, extend the
classifier with the task's classes, then minimize the total loss with Adam
over PK mini-batches. The first stage (pretrain split, or task 1 when no
pretrain exists) trains without a stability term.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import BatchSpec, LabeledBatch, TaskSequence, sample_pk_batch
from .errors import MissingTeacher, NonFiniteLoss
from .evaluate import RetrievalReport, evaluate_checkpoint
from .losses import LossWeights, total_loss
from .models import (
    EmbeddingModel,
    ModelSnapshot,
    extend_classifier,
    snapshot,
)


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_task: int = 100
    batch_spec: BatchSpec = field(default_factory=BatchSpec)
    lr_first_task: float = 1e-3
    lr_later_tasks: float = 1e-5
    classifier_lr: float | None = None  # optional two-group learning rates
    loss_weights: LossWeights = field(default_factory=LossWeights)
    use_triplet: bool = True
    seed: int = 0
    random_crop: bool = False
    horizontal_flip: bool = False
    deterministic: bool = False

    def __post_init__(self):
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")
        if self.lr_first_task <= 0 or self.lr_later_tasks <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class EpochRecord:
    task: int
    epoch: int
    total: float
    components: dict  # weighted-sum of entries reproduces `total`
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "task": self.task,
                "epoch": self.epoch,
                "total": self.total,
                "components": self.components,
                "wall_time": self.wall_time,
            },
            sort_keys=True,
        )


TrainingTrace = list  # of EpochRecord


def _augment(batch: LabeledBatch, config: TrainConfig,
             rng: np.random.Generator) -> LabeledBatch:
    """Optional horizontal-flip / random-crop stubs for image-shaped inputs."""
    x = batch.inputs
    if x.ndim < 3 or not (config.horizontal_flip or config.random_crop):
        return batch
    x = x.copy()
    if config.horizontal_flip:
        flip = rng.random(len(x)) < 0.5
        x[flip] = x[flip, :, ::-1]
    if config.random_crop:
        pad = 2
        h, w = x.shape[1], x.shape[2]
        padded = np.pad(
            x, [(0, 0), (pad, pad), (pad, pad)] + [(0, 0)] * (x.ndim - 3)
        )
        for i in range(len(x)):
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            x[i] = padded[i, dy : dy + h, dx : dx + w]
    return LabeledBatch(inputs=x, labels=batch.labels)


def _make_optimizer(model: EmbeddingModel, config: TrainConfig,
                    is_first_task: bool) -> torch.optim.Optimizer:
    lr = config.lr_first_task if is_first_task else config.lr_later_tasks
    groups = [{"params": model.representation_parameters(), "lr": lr}]
    cls_lr = config.classifier_lr if config.classifier_lr is not None else lr
    groups.append({"params": model.classifier_parameters(), "lr": cls_lr})
    return torch.optim.Adam(groups)


def train_task(student: EmbeddingModel, teacher: ModelSnapshot | None,
               train_split, config: TrainConfig, is_first_task: bool
               ) -> tuple[EmbeddingModel, TrainingTrace]:
    """Train the student on one task's split; the teacher stays frozen."""
    if not is_first_task and teacher is None:
        raise MissingTeacher("training a later task without a snapshot")
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)

    rng = np.random.default_rng(
        [config.seed, config.batch_spec.seed, train_split.task]
    )
    optimizer = _make_optimizer(student, config, is_first_task)
    batch_size = config.batch_spec.batch_size
    steps_per_epoch = max(1, len(train_split) // batch_size)

    trace: TrainingTrace = []
    weights = config.loss_weights
    for epoch in range(config.epochs_per_task):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        total_sum = 0.0
        for _ in range(steps_per_epoch):
            batch = _augment(
                sample_pk_batch(train_split, config.batch_spec, rng),
                config, rng,
            )
            x = torch.as_tensor(batch.inputs, dtype=torch.float64)
            cols = student.label_columns(batch.labels)
            out = student(x)
            if is_first_task:
                t_feats = t_logits = None
            else:
                t_out = teacher.forward(x)
                t_feats, t_logits = t_out.features, t_out.logits
            loss, comps = total_loss(
                out.features, out.logits, cols, weights,
                is_first_task=is_first_task,
                teacher_features=t_feats, teacher_logits=t_logits,
                use_triplet=config.use_triplet,
            )
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at task {train_split.task} "
                    f"epoch {epoch}",
                    batch_dump={
                        "labels": batch.labels.tolist(),
                        "components": {
                            k: float(v) for k, v in comps.items()
                        },
                    },
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_sum += float(loss.detach())
            for name, value in comps.items():
                sums[name] = sums.get(name, 0.0) + float(value.detach())
        trace.append(
            EpochRecord(
                task=train_split.task,
                epoch=epoch,
                total=total_sum / steps_per_epoch,
                components={
                    k: v / steps_per_epoch for k, v in sums.items()
                },
                wall_time=time.perf_counter() - t0,
            )
        )
    return student, trace


def run_sequence(model: EmbeddingModel, seq: TaskSequence, config: TrainConfig,
                 ks=(1,), checkpoint_hook=None
                 ) -> tuple[EmbeddingModel, list[ModelSnapshot],
                            RetrievalReport, TrainingTrace]:
    """Train through a task sequence, evaluating after every stage.

    Returns the final model, the per-stage teacher snapshots, a retrieval
    report with one checkpoint per stage, and the concatenated trace.
    `checkpoint_hook(model, checkpoint_index, label)` runs after each stage.
    """
    report = RetrievalReport(ks=tuple(ks))
    snapshots: list[ModelSnapshot] = []
    trace: TrainingTrace = []
    checkpoint = 0

    def after_stage(label):
        nonlocal checkpoint
        report.add(evaluate_checkpoint(model, seq, ks, checkpoint, label))
        if checkpoint_hook is not None:
            checkpoint_hook(model, checkpoint, label)
        checkpoint += 1

    first_done = False
    if seq.pretrain is not None:
        extend_classifier(model, seq.pretrain.class_ids)
        _, t = train_task(model, None, seq.pretrain.train, config,
                          is_first_task=True)
        trace.extend(t)
        first_done = True
        after_stage("pretrain")

    for i, task in enumerate(seq.tasks):
        teacher = snapshot(model) if first_done else None
        if teacher is not None:
            snapshots.append(teacher)
        extend_classifier(model, task.class_ids)
        _, t = train_task(model, teacher, task.train, config,
                          is_first_task=not first_done)
        trace.extend(t)
        first_done = True
        after_stage(f"task{i + 1}")

    return model, snapshots, report, trace


def config_for_mask(config: TrainConfig, mask: set[str]) -> TrainConfig:
    """Apply a loss-component mask (subset of {ce, triplet, kd, csd})."""
    if "ce" not in mask:
        raise ValueError("component mask must include 'ce'")
    unknown = mask - {"ce", "triplet", "kd", "csd"}
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    w = config.loss_weights
    w = replace(
        w,
        lambda_kd=w.lambda_kd if "kd" in mask else 0.0,
        lambda_csd=w.lambda_csd if "csd" in mask else 0.0,
    )
    return replace(config, loss_weights=w, use_triplet="triplet" in mask)
