"""Loss kernels for the teacher-student continual training objective.

total = plasticity + stability
    plasticity = cross_entropy + triplet   (new-task acquisition)
    stability  = lambda_kd * kd + lambda_csd * csd   (old-knowledge retention)

All kernels are pure functions of batch tensors, differentiable w.r.t. the
student's features/logits. Teacher tensors are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import (
    LabelOutOfRange,
    MissingTeacher,
    NoNegative,
    NoPositive,
    ShapeMismatch,
)


@dataclass(frozen=True)
class LossWeights:
    lambda_kd: float = 1.0
    lambda_csd: float = 1.0
    triplet_margin: float = 0.3
    kd_temperature: float = 1.0
    csd_temperature: float = 1.0
    normalize_csd_features: bool = False

    def __post_init__(self):
        if self.kd_temperature <= 0 or self.csd_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.lambda_kd < 0 or self.lambda_csd < 0 or self.triplet_margin < 0:
            raise ValueError("weights and margin must be nonnegative")


def positive_index(labels: torch.Tensor) -> list[list[int]]:
    """P(i): indices p != i with the same label as i."""
    labels = labels.view(-1)
    return [
        [p for p in range(len(labels)) if p != i and labels[p] == labels[i]]
        for i in range(len(labels))
    ]


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax(logits_i)[y_i]."""
    labels = labels.view(-1)
    if labels.max() >= logits.shape[1] or labels.min() < 0:
        raise LabelOutOfRange(
            f"label outside [0, {logits.shape[1]})"
        )
    logp = F.log_softmax(logits, dim=1)
    return -logp[torch.arange(len(labels)), labels].mean()


def _pairwise_sq_dists(features: torch.Tensor) -> torch.Tensor:
    # ||a-b||^2 = ||a||^2 - 2 a.b + ||b||^2, clamped for roundoff
    dots = features @ features.t()
    sq = torch.diagonal(dots)
    d = sq.unsqueeze(0) - 2.0 * dots + sq.unsqueeze(1)
    return torch.clamp(d, min=0.0)


def triplet_loss(features: torch.Tensor, labels: torch.Tensor,
                 margin: float = 0.3) -> torch.Tensor:
    """Batch-hard triplet loss on squared Euclidean distances.

    For each anchor: hardest positive (farthest same-label) and hardest
    negative (closest other-label), hinged at `margin`.
    """
    labels = labels.view(-1)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not pos_mask.any(dim=1).all():
        raise NoPositive("some anchor has no positive in the batch")
    if not neg_mask.any(dim=1).all():
        raise NoNegative("batch contains a single class")
    d = _pairwise_sq_dists(features)
    inf = torch.tensor(float("inf"), dtype=d.dtype)
    hardest_pos = torch.where(pos_mask, d, -inf).max(dim=1).values
    hardest_neg = torch.where(neg_mask, d, inf).min(dim=1).values
    return torch.clamp(hardest_pos - hardest_neg + margin, min=0.0).mean()


def kd_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
            temperature: float = 1.0) -> torch.Tensor:
    """Soft cross-entropy between teacher and student class distributions."""
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatch(
            f"{tuple(student_logits.shape)} vs {tuple(teacher_logits.shape)}"
        )
    t = F.softmax(teacher_logits.detach() / temperature, dim=1)
    logp = F.log_softmax(student_logits / temperature, dim=1)
    return -(t * logp).sum(dim=1).mean()


def csd_loss(teacher_features: torch.Tensor, student_features: torch.Tensor,
             labels: torch.Tensor, temperature: float = 1.0,
             normalize: bool = False) -> torch.Tensor:
    """Contrastive supervised distillation.

    Teacher features act as fixed anchors; each anchor attracts the student
    features of its own class and repels the rest. Anchors without in-batch
    positives contribute nothing and are excluded from the average.
    """
    if teacher_features.shape != student_features.shape:
        raise ShapeMismatch(
            f"{tuple(teacher_features.shape)} vs {tuple(student_features.shape)}"
        )
    labels = labels.view(-1)
    anchors = teacher_features.detach()
    student = student_features
    if normalize:
        anchors = F.normalize(anchors, dim=1)
        student = F.normalize(student, dim=1)
    n = len(labels)
    sims = (anchors @ student.t()) / temperature  # (i anchors, a student)
    eye = torch.eye(n, dtype=torch.bool)
    # log softmax over a != i for each anchor row
    masked = sims.masked_fill(eye, float("-inf"))
    log_denom = torch.logsumexp(masked, dim=1, keepdim=True)
    log_prob = sims - log_denom
    pos_mask = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~eye
    pos_counts = pos_mask.sum(dim=1)
    has_pos = pos_counts > 0
    if not has_pos.any():
        return torch.zeros((), dtype=student_features.dtype)
    per_anchor = (log_prob * pos_mask).sum(dim=1)[has_pos] / pos_counts[has_pos]
    return -per_anchor.mean()


def plasticity_loss(features: torch.Tensor, logits: torch.Tensor,
                    labels: torch.Tensor, weights: LossWeights,
                    use_triplet: bool = True):
    """CE + triplet. Returns (total, components dict)."""
    ce = cross_entropy(logits, labels)
    components = {"ce": ce}
    total = ce
    if use_triplet:
        tri = triplet_loss(features, labels, weights.triplet_margin)
        components["triplet"] = tri
        total = total + tri
    return total, components


def stability_loss(student_features, student_logits, teacher_features,
                   teacher_logits, labels, weights: LossWeights):
    """lambda_kd * KD + lambda_csd * CSD, student logits sliced to the
    teacher's classes. Returns (total, components dict)."""
    c_old = teacher_logits.shape[1]
    kd = kd_loss(student_logits[:, :c_old], teacher_logits,
                 weights.kd_temperature)
    csd = csd_loss(teacher_features, student_features, labels,
                   weights.csd_temperature, weights.normalize_csd_features)
    total = weights.lambda_kd * kd + weights.lambda_csd * csd
    return total, {"kd": kd, "csd": csd}


def total_loss(student_features, student_logits, labels, weights: LossWeights,
               is_first_task: bool, teacher_features=None, teacher_logits=None,
               use_triplet: bool = True):
    """Full objective; stability is identically zero on the first task.

    Returns (total, components dict with float entries per kernel).
    """
    total, components = plasticity_loss(
        student_features, student_logits, labels, weights, use_triplet
    )
    if not is_first_task:
        if teacher_features is None or teacher_logits is None:
            raise MissingTeacher("later tasks require a teacher snapshot")
        stab, stab_components = stability_loss(
            student_features, student_logits, teacher_features,
            teacher_logits, labels, weights,
        )
        total = total + stab
        components.update(stab_components)
    return total, components
