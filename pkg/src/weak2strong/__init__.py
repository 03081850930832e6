"""Early weak-to-strong distillation for faster time-to-target training."""

from .estimators import EarlyDistillClassifier, EarlyDistillDenoiser
from .metrics import (CrossingRule, MetricSeries, TeacherBandReport, TeacherRegime,
                      classify_teacher_band, first_at_tau, linear_cka, mean_entropy, mean_kl,
                      speedup_ratio)
from .models import FrozenTeacher, ModelParams, ModelSpec
from .schedule import (DistillConfig, GateState, KLDirection, LambdaSchedule, MetricDirection,
                       TemperatureSchedule, compose_loss, effective_lambda, gate_update, lambda_at,
                       surpass, temperature_at)

__version__ = "0.1.0"

__all__ = [
    "CrossingRule", "DistillConfig", "EarlyDistillClassifier", "EarlyDistillDenoiser",
    "FrozenTeacher", "GateState", "KLDirection", "LambdaSchedule", "MetricDirection",
    "MetricSeries", "ModelParams", "ModelSpec", "TeacherBandReport", "TeacherRegime",
    "TemperatureSchedule", "classify_teacher_band", "compose_loss", "effective_lambda",
    "first_at_tau", "gate_update", "lambda_at", "linear_cka", "mean_entropy", "mean_kl",
    "speedup_ratio", "surpass", "temperature_at",
]
