"""
Training objectives: adaptive-threshold relation loss, evidence KL losses and
their weighted combination.

Usage:
    l_re = atl_loss_batch(out.scores, features.labels)
    l_er = er_doc_loss(features.evidence, out.signals.p, features.evidence_mask)
    bundle = total_loss(l_re, l_er, lam=0.1, phase="teacher")
    backward(bundle.total)
"""
from dataclasses import dataclass
from typing import Iterable, Optional, Union

import numpy as np

from numerics import DiffTensor, ShapeError, as_tensor, log, log_softmax, masked_fill, take

KL_EPSILON = 1e-10
MASKED_LOGIT = -1e30
PHASES = ("teacher", "student")


def atl_loss_batch(scores: DiffTensor, labels: np.ndarray) -> DiffTensor:
    """
    Adaptive thresholding loss averaged over pairs.

    labels is a (pairs, num_class) boolean matrix of positive relations;
    column 0 is the threshold class and is ignored as a positive.
    Positives are pushed above the threshold, every other class below it.
    """
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeError("atl_loss", scores.shape, labels.shape)
    positives = labels.copy()
    positives[:, 0] = False
    threshold = np.zeros_like(positives)
    threshold[:, 0] = True

    # Positives compete against the threshold only.
    positive_logits = masked_fill(scores, ~(positives | threshold), MASKED_LOGIT)
    positive_term = masked_fill(log_softmax(positive_logits, axis=-1), ~positives, 0.0).sum(axis=-1)

    # The threshold competes against every non-positive class.
    negative_logits = masked_fill(scores, positives, MASKED_LOGIT)
    threshold_term = take(log_softmax(negative_logits, axis=-1), [0], axis=1).sum(axis=-1)

    return -(positive_term + threshold_term).mean()


def atl_loss(scores: DiffTensor, positive_set: Iterable[int]) -> DiffTensor:
    """ATL for a single pair's (num_class,) score vector."""
    scores = as_tensor(scores)
    labels = np.zeros((1, scores.shape[0]), dtype=bool)
    for r in positive_set:
        if r == 0:
            raise ValueError("The threshold class 0 cannot be a positive relation")
        labels[0, r] = True
    return atl_loss_batch(scores.reshape(1, scores.shape[0]), labels)


def kl_divergence(target: np.ndarray, predicted: DiffTensor, eps: float = KL_EPSILON) -> DiffTensor:
    """
    KL(target || smoothed predicted) over the last axis.

    predicted is smoothed to (predicted + eps) / (1 + n * eps); zero target
    entries contribute nothing. target is a constant.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != predicted.shape:
        raise ShapeError("kl_divergence", target.shape, predicted.shape)
    n = target.shape[-1]
    smoothed = (predicted + eps) * (1.0 / (1.0 + n * eps))
    positive = target > 0
    neg_entropy = np.sum(np.where(positive, target * np.log(np.where(positive, target, 1.0)), 0.0), axis=-1)
    cross = -(log(smoothed) * DiffTensor(target)).sum(axis=-1)
    return cross + DiffTensor(neg_entropy)


def _masked_mean(per_row: DiffTensor, mask: Optional[np.ndarray]) -> DiffTensor:
    rows = np.arange(per_row.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        return DiffTensor(0.0)
    return take(per_row, rows).mean()


def er_doc_loss(z: np.ndarray, p: DiffTensor, supervised: Optional[np.ndarray] = None) -> DiffTensor:
    """
    KL(z || p) between gold evidence and predicted sentence importance.

    For (pairs, sentences) inputs, the mean over pairs with supervised=True
    (all pairs when None); 0 when no pair is supervised.
    """
    z = np.asarray(z, dtype=float)
    kl = kl_divergence(z, p)
    if z.ndim == 1:
        return kl
    return _masked_mean(kl, supervised)


def er_sent_loss(q_teacher: np.ndarray, q_student: DiffTensor,
                 supervised: Optional[np.ndarray] = None) -> DiffTensor:
    """
    KL(q_teacher || q_student) over tokens; the teacher side carries no gradient.
    """
    q_teacher = np.asarray(q_teacher.values if isinstance(q_teacher, DiffTensor) else q_teacher, dtype=float)
    if q_teacher.shape != q_student.shape:
        raise ValueError(f"Teacher and student token distributions differ in shape: "
                         f"{q_teacher.shape} vs {q_student.shape}")
    kl = kl_divergence(q_teacher, q_student)
    if q_teacher.ndim == 1:
        return kl
    return _masked_mean(kl, supervised)


@dataclass
class LossBundle:
    """total = (1 - lam) * l_re + lam * l_er, with l_er the phase's evidence term."""
    l_re: DiffTensor
    l_er: DiffTensor
    total: DiffTensor
    lam: float
    phase: str

    @property
    def l_er_doc(self) -> float:
        return self.l_er.item() if self.phase == "teacher" else 0.0

    @property
    def l_er_sent(self) -> float:
        return self.l_er.item() if self.phase == "student" else 0.0

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total.values).all())

    def to_dict(self) -> dict:
        return {"l_re": self.l_re.item(), "l_er": self.l_er.item(), "total": self.total.item()}


def total_loss(l_re: Union[DiffTensor, float], l_er: Union[DiffTensor, float], lam: float,
               phase: str = "teacher") -> LossBundle:
    """Weighted sum (1 - lam) * l_re + lam * l_er."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if phase not in PHASES:
        raise ValueError(f"Unknown loss phase {phase!r}; expected one of {PHASES}")
    l_re = as_tensor(l_re)
    l_er = as_tensor(l_er)
    total = l_re * (1.0 - lam) + l_er * lam
    return LossBundle(l_re=l_re, l_er=l_er, total=total, lam=lam, phase=phase)
