"""Base and distillation loss kernels with analytic gradients.

All batch reductions are arithmetic means. Gradients are returned with
respect to the student's raw outputs (logits or noise predictions).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .schedule import KLDirection


def _check_logits(logits: np.ndarray, name: str) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"{name} must be a (batch, classes>=2) matrix, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError(f"{name} contains non-finite entries")
    return logits


def smoothed_targets(labels: np.ndarray, num_classes: int, smoothing_eps: float = 0.0,
                     dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a vector")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    if not 0 <= smoothing_eps < 1:
        raise ValueError("smoothing_eps must lie in [0, 1)")
    q = np.full((labels.size, num_classes), smoothing_eps / num_classes, dtype=dtype)
    q[np.arange(labels.size), labels] += 1.0 - smoothing_eps
    return q


def ce_loss(logits, labels, smoothing_eps: float = 0.0):
    """Cross-entropy against one-hot or label-smoothed targets.

    Returns ``(loss, grad)`` where ``grad = (softmax(logits) - q) / batch``.
    """
    logits = _check_logits(logits, "logits")
    n, k = logits.shape
    q = smoothed_targets(labels, k, smoothing_eps, dtype=logits.dtype)
    logp = log_softmax(logits, axis=1)
    loss = float(-(q * logp).sum() / n)
    grad = (np.exp(logp) - q) / n
    return loss, grad


def kd_loss(student, teacher, temperature: float, kl_direction=KLDirection.FORWARD):
    """Temperature-softened KL between teacher and student, scaled by ``T**2``.

    Forward is ``KL(p_teacher || p_student)``; reverse swaps the arguments.
    Returns ``(loss, grad_wrt_student_logits)``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    student = _check_logits(student, "student logits")
    teacher = _check_logits(teacher, "teacher logits")
    if student.shape != teacher.shape:
        raise ValueError(f"shape mismatch: {student.shape} vs {teacher.shape}")
    n = student.shape[0]
    T = temperature
    log_ps = log_softmax(student / T, axis=1)
    log_pt = log_softmax(teacher / T, axis=1)
    ps = np.exp(log_ps)
    if KLDirection.parse(kl_direction) is KLDirection.FORWARD:
        pt = np.exp(log_pt)
        per_row = (pt * (log_pt - log_ps)).sum(axis=1)
        grad = T * (ps - pt) / n
    else:
        d = log_ps - log_pt
        per_row = (ps * d).sum(axis=1)
        grad = T * ps * (d - per_row[:, None]) / n
    # KL is nonnegative; clip roundoff below zero.
    loss = float(T * T * max(per_row.mean(), 0.0))
    return loss, grad


def smooth_l1(diff: np.ndarray, beta: float = 1.0) -> np.ndarray:
    a = np.abs(diff)
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def teacher_confidence(cls_logits: np.ndarray) -> np.ndarray:
    # Detection heads are multi-label: per-class sigmoid, max over classes.
    return expit(np.asarray(cls_logits)).max(axis=1)


def det_distill_terms(student_cls, student_box, teacher_cls, teacher_box,
                      temperature: float, score_threshold: float):
    """Per-anchor pieces of the detection distillation loss.

    Returns ``(mask, cls_per_anchor, box_per_anchor)``; the per-anchor values
    are computed for every anchor and the mask selects the confident ones.
    """
    student_cls = np.asarray(student_cls, dtype=float)
    teacher_cls = np.asarray(teacher_cls, dtype=float)
    student_box = np.asarray(student_box, dtype=float)
    teacher_box = np.asarray(teacher_box, dtype=float)
    if student_cls.shape != teacher_cls.shape:
        raise ValueError(f"cls shape mismatch: {student_cls.shape} vs {teacher_cls.shape}")
    if student_box.shape != teacher_box.shape or student_box.ndim != 2 or student_box.shape[1] != 4:
        raise ValueError(f"box deltas must be matching (anchors, 4) matrices, got "
                         f"{student_box.shape} vs {teacher_box.shape}")
    if student_box.shape[0] != student_cls.shape[0]:
        raise ValueError("anchor count differs between cls logits and box deltas")
    if not 0 <= score_threshold <= 1:
        raise ValueError("score_threshold must lie in [0, 1]")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    T = temperature
    mask = teacher_confidence(teacher_cls) >= score_threshold
    log_ps = log_softmax(student_cls / T, axis=1)
    log_pt = log_softmax(teacher_cls / T, axis=1)
    cls = T * T * np.maximum((np.exp(log_pt) * (log_pt - log_ps)).sum(axis=1), 0.0)
    box = smooth_l1(student_box - teacher_box).sum(axis=1)
    return mask, cls, box


def det_distill_loss(student_cls, student_box, teacher_cls, teacher_box,
                     temperature: float = 2.0, score_threshold: float = 0.2,
                     beta: float = 1.0) -> float:
    """``cls + beta * box`` averaged over anchors the teacher is confident on."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    mask, cls, box = det_distill_terms(student_cls, student_box, teacher_cls, teacher_box,
                                       temperature, score_threshold)
    if not mask.any():
        return 0.0
    total = cls[mask].mean()
    if beta:
        total = total + beta * box[mask].mean()
    return float(total)


def timestep_mask(timesteps, t_max: int, mask_ratio: float, mode: str = "early") -> np.ndarray:
    """Samples kept by diffusion-timestep masking.

    ``early`` keeps ``t < ratio * t_max``; ``late`` keeps ``t >= (1 - ratio) * t_max``.
    """
    t = np.asarray(timesteps)
    if not 0 <= mask_ratio <= 1:
        raise ValueError("mask_ratio must lie in [0, 1]")
    if t.size and (t.min() < 0 or t.max() >= t_max):
        raise ValueError(f"timesteps must lie in [0, {t_max})")
    if mask_ratio == 1:
        return np.ones(t.shape, dtype=bool)
    if mode == "early":
        return t < mask_ratio * t_max
    if mode == "late":
        return t >= (1 - mask_ratio) * t_max
    raise ValueError(f"unknown mask mode {mode!r}")


def gen_distill_loss(student_eps, teacher_eps, timesteps, t_max: int, mask_ratio: float = 0.5,
                     mode: str = "early", teacher_timesteps=None):
    """Masked mean of per-sample squared distance between noise predictions.

    Returns ``(loss, grad_wrt_student_eps)``.
    """
    student_eps = np.asarray(student_eps)
    teacher_eps = np.asarray(teacher_eps)
    if student_eps.shape != teacher_eps.shape:
        raise ValueError(f"shape mismatch: {student_eps.shape} vs {teacher_eps.shape}")
    if teacher_timesteps is not None and not np.array_equal(timesteps, teacher_timesteps):
        raise ValueError("teacher and student were evaluated at different timesteps")
    keep = timestep_mask(timesteps, t_max, mask_ratio, mode)
    grad = np.zeros_like(student_eps)
    n_keep = int(keep.sum())
    if n_keep == 0:
        return 0.0, grad
    diff = student_eps - teacher_eps
    sq = (diff * diff).reshape(diff.shape[0], -1).sum(axis=1)
    loss = float(sq[keep].mean())
    grad[keep] = 2.0 * diff[keep] / n_keep
    return loss, grad


def gen_base_loss(predicted_eps, true_eps):
    """Elementwise mean squared error; returns ``(loss, grad)``."""
    predicted_eps = np.asarray(predicted_eps)
    true_eps = np.asarray(true_eps)
    if predicted_eps.shape != true_eps.shape:
        raise ValueError(f"shape mismatch: {predicted_eps.shape} vs {true_eps.shape}")
    diff = predicted_eps - true_eps
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size
