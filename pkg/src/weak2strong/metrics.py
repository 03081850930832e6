"""Time-to-target metrics and teacher/student diagnostics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .schedule import MetricDirection


@dataclass(frozen=True)
class MetricSeries:
    """Validation history as parallel ``indices`` / ``values`` tuples."""

    indices: tuple[float, ...]
    values: tuple[float, ...]
    direction: MetricDirection = MetricDirection.HIGHER

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(self.indices))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "direction", MetricDirection.parse(self.direction))
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("indices must be strictly increasing")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("metric values must be finite")

    @classmethod
    def from_values(cls, values: Sequence[float], direction=MetricDirection.HIGHER, start: int = 1):
        return cls(tuple(range(start, start + len(values))), tuple(values), direction)

    def __len__(self):
        return len(self.values)

    def best(self) -> float:
        if not self.values:
            return float("nan")
        return max(self.values) if self.direction is MetricDirection.HIGHER else min(self.values)


@dataclass(frozen=True)
class CrossingRule:
    tau: float
    consecutive_hits: int = 1

    def __post_init__(self):
        if self.consecutive_hits < 1:
            raise ValueError("consecutive_hits must be >= 1")


def hits(series: MetricSeries, tau: float) -> np.ndarray:
    v = np.asarray(series.values, dtype=float)
    return v >= tau if series.direction is MetricDirection.HIGHER else v <= tau


def first_at_tau(series: MetricSeries, rule: CrossingRule):
    """First index opening a run of ``consecutive_hits`` evaluations past ``tau``.

    Returns ``None`` if no such run exists.
    """
    if len(series) == 0:
        raise ValueError("empty metric series")
    run = 0
    for i, hit in enumerate(hits(series, rule.tau)):
        run = run + 1 if hit else 0
        if run >= rule.consecutive_hits:
            return series.indices[i - rule.consecutive_hits + 1]
    return None


def speedup_ratio(base, ours) -> float:
    if base is None or ours is None:
        raise ValueError("speedup needs both first@tau indices")
    if not (base > 0 and ours > 0):
        raise ValueError("first@tau indices must be positive")
    return base / ours


def format_speedup(base, ours) -> str:
    if base is None or ours is None:
        return "—"
    return f"{speedup_ratio(base, ours):.2f}×"


def linear_cka(features_x, features_y) -> float:
    """Linear centered kernel alignment between two feature matrices (rows = samples)."""
    x = np.asarray(features_x, dtype=np.float64)
    y = np.asarray(features_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("features must be matrices with the same number of rows")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    xx = np.linalg.norm(x.T @ x)
    yy = np.linalg.norm(y.T @ y)
    if xx == 0 or yy == 0:
        raise ValueError("zero-variance features: CKA undefined")
    cross = np.linalg.norm(x.T @ y) ** 2
    return float(min(max(cross / (xx * yy), 0.0), 1.0))


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"{name} must be a (batch, K) matrix")
    if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ValueError(f"{name} rows must be probability distributions")
    return p


def mean_entropy(probs) -> float:
    p = _check_distribution(probs, "probs")
    logp = np.log(p, where=p > 0, out=np.zeros_like(p))
    return float(-(p * logp).sum(axis=1).mean())


def mean_kl(p, q) -> float:
    """Mean rowwise ``KL(p || q)``."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError("p and q shapes differ")
    support = p > 0
    if np.any(support & (q == 0)):
        raise ValueError("q is zero where p is positive: divergence is infinite")
    ratio = np.log(np.divide(p, q, where=support, out=np.ones_like(p)))
    return float(max((p * ratio).sum(axis=1).mean(), 0.0))


class TeacherRegime(str, enum.Enum):
    TOO_WEAK = "too_weak"
    SUITABLY_WEAKER = "suitably_weaker"
    TOO_STRONG = "too_strong"


@dataclass(frozen=True)
class TeacherBandReport:
    teacher_metric: float
    baseline_student_metric: float
    relative_gap: float
    regime: TeacherRegime
    band_edges: tuple[float, float] = field(default=(-15.0, 0.0))


def classify_teacher_band(teacher_metric: float, baseline_student_metric: float,
                          band_edges: tuple[float, float] = (-15.0, 0.0)) -> TeacherBandReport:
    """Relative gap in percent (teacher minus student) and the resulting regime.

    The suitable band is ``[low, high)``.
    """
    if not baseline_student_metric > 0:
        raise ValueError("baseline student metric must be positive")
    low, high = band_edges
    gap = 100.0 * (teacher_metric - baseline_student_metric) / baseline_student_metric
    if gap < low:
        regime = TeacherRegime.TOO_WEAK
    elif gap < high:
        regime = TeacherRegime.SUITABLY_WEAKER
    else:
        regime = TeacherRegime.TOO_STRONG
    return TeacherBandReport(float(teacher_metric), float(baseline_student_metric), gap, regime,
                             (float(low), float(high)))
