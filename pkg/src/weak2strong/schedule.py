"""Distillation-weight schedule, temperature schedule and the surpass gate.

The gate follows the early-stopping rule for the distillation term: every
validation event updates a counter ``c <- s(m, m_ref) * (c + 1)`` and the
distillation term is switched off for good once ``c >= k``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .exceptions import CorruptMetricError, DivergenceError


class MetricDirection(str, enum.Enum):
    HIGHER = "higher"
    LOWER = "lower"

    @classmethod
    def parse(cls, value: "MetricDirection | str") -> "MetricDirection":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"higher": cls.HIGHER, "higherisbetter": cls.HIGHER, "max": cls.HIGHER,
                   "lower": cls.LOWER, "lowerisbetter": cls.LOWER, "min": cls.LOWER}
        if key not in aliases:
            raise ValueError(f"unknown metric direction {value!r}")
        return aliases[key]


class KLDirection(str, enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"

    @classmethod
    def parse(cls, value: "KLDirection | str") -> "KLDirection":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class LambdaSchedule:
    """Piecewise-linear warmup / hold / decay profile for the distillation weight."""

    warmup_end: float
    hold_end: float
    decay_end: float
    lambda_max: float = 1.0

    def __post_init__(self):
        if not 0 <= self.warmup_end <= self.hold_end <= self.decay_end:
            raise ValueError(
                "schedule requires 0 <= warmup_end <= hold_end <= decay_end, got "
                f"({self.warmup_end}, {self.hold_end}, {self.decay_end})")
        if not self.lambda_max >= 0:
            raise ValueError("lambda_max must be nonnegative")

    def __call__(self, u: float) -> float:
        return lambda_at(self, u)


@dataclass(frozen=True)
class TemperatureSchedule:
    t_start: float = 6.0
    t_end: float = 1.0
    decay_end: float = 30.0

    def __post_init__(self):
        if not (self.t_start > 0 and self.t_end > 0):
            raise ValueError("temperatures must be positive")
        if self.decay_end < 0:
            raise ValueError("decay_end must be nonnegative")

    def __call__(self, u: float) -> float:
        return temperature_at(self, u)


def lambda_at(schedule: LambdaSchedule, u: float) -> float:
    w, h, d, lam = schedule.warmup_end, schedule.hold_end, schedule.decay_end, schedule.lambda_max
    if u < 0 or u >= d:
        return 0.0
    if u < w:
        return lam * u / w
    if u < h:
        return lam
    return lam * (d - u) / (d - h)


def temperature_at(ts: TemperatureSchedule, u: float) -> float:
    if ts.decay_end == 0 or u >= ts.decay_end:
        return ts.t_end
    frac = max(u, 0.0) / ts.decay_end
    return ts.t_start + (ts.t_end - ts.t_start) * frac


def surpass(m: float, m_ref: float, direction: MetricDirection | str) -> int:
    """1 if metric ``m`` is at least as good as the reference, else 0."""
    if not (math.isfinite(m) and math.isfinite(m_ref)):
        raise CorruptMetricError(f"non-finite validation metric: m={m}, m_ref={m_ref}")
    if MetricDirection.parse(direction) is MetricDirection.HIGHER:
        return int(m >= m_ref)
    return int(m <= m_ref)


@dataclass(frozen=True)
class GateState:
    """Immutable snapshot of the surpass gate.

    ``stop_k`` may be ``math.inf`` to disable stopping.
    """

    m_ref: float
    stop_k: float = 2
    direction: MetricDirection = MetricDirection.HIGHER
    counter_c: int = 0
    active_a: bool = True
    updates: int = 0
    off_at: int | None = field(default=None)

    def __post_init__(self):
        if not self.stop_k >= 1:
            raise ValueError("stop_k must be a positive integer (or inf)")
        object.__setattr__(self, "direction", MetricDirection.parse(self.direction))


def gate_update(state: GateState, m: float) -> GateState:
    """Fold one validation metric into the gate.

    ``off_at`` records the 1-based validation count at which the gate closed.
    """
    s = surpass(m, state.m_ref, state.direction)
    counter = s * (state.counter_c + 1)
    updates = state.updates + 1
    if not state.active_a:
        return replace(state, counter_c=counter, updates=updates)
    if counter >= state.stop_k:
        return replace(state, counter_c=counter, updates=updates, active_a=False, off_at=updates)
    return replace(state, counter_c=counter, updates=updates)


@dataclass(frozen=True)
class DistillConfig:
    gamma: float = 1.0
    schedule: LambdaSchedule = field(default_factory=lambda: LambdaSchedule(1, 5, 10, 1.0))
    temperature: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    stop_k: float = 2
    kl_direction: KLDirection = KLDirection.FORWARD

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be nonnegative")
        object.__setattr__(self, "kl_direction", KLDirection.parse(self.kl_direction))

    def initial_gate(self, m_ref: float, direction: MetricDirection | str) -> GateState:
        return GateState(m_ref=m_ref, stop_k=self.stop_k, direction=MetricDirection.parse(direction))


def effective_lambda(config: DistillConfig, state: GateState, u: float) -> float:
    return lambda_at(config.schedule, u) if state.active_a else 0.0


def compose_loss(l_base: float, l_distill: float, gamma: float, lam: float) -> float:
    if not (math.isfinite(l_base) and math.isfinite(l_distill)):
        raise DivergenceError(f"non-finite loss: base={l_base}, distill={l_distill}")
    if lam == 0 or gamma == 0:
        return l_base
    return l_base + gamma * lam * l_distill
