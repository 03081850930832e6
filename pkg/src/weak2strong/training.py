"""One distillation-aware optimizer step and the validation-gated training loop.

The loop is task-agnostic. A task supplies an *objective* (base and
distillation losses with gradients), a batch generator, and an evaluation
function. The composed loss is ``L_base + gamma * lambda_eff * L_distill``
where ``lambda_eff`` is zero once the surpass gate has closed.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Sequence

import numpy as np

from . import losses
from .exceptions import DivergenceError
from .models import FrozenTeacher, ModelParams, ModelSpec, backward, forward
from .schedule import (DistillConfig, GateState, MetricDirection, compose_loss, effective_lambda,
                       gate_update, temperature_at)


@dataclass(frozen=True)
class Batch:
    inputs: Any
    targets: np.ndarray
    key: tuple = ()
    fingerprint: str = ""


class ClassificationObjective:
    def __init__(self, label_smoothing: float = 0.0, kl_direction="forward"):
        self.label_smoothing = label_smoothing
        self.kl_direction = kl_direction

    def base(self, outputs, batch: Batch):
        return losses.ce_loss(outputs, batch.targets, self.label_smoothing)

    def distill(self, outputs, teacher_outputs, batch: Batch, temperature: float):
        return losses.kd_loss(outputs, teacher_outputs, temperature, self.kl_direction)


class DenoisingObjective:
    def __init__(self, t_max: int, mask_ratio: float = 0.5, mask_mode: str = "early"):
        self.t_max = t_max
        self.mask_ratio = mask_ratio
        self.mask_mode = mask_mode

    def base(self, outputs, batch: Batch):
        return losses.gen_base_loss(outputs, batch.targets)

    def distill(self, outputs, teacher_outputs, batch: Batch, temperature: float):
        _, t = batch.inputs
        return losses.gen_distill_loss(outputs, teacher_outputs, t, self.t_max,
                                       self.mask_ratio, self.mask_mode)


@dataclass(frozen=True)
class StepLog:
    u: float
    l_base: float
    l_distill: float
    lambda_eff: float
    temperature: float
    grad_norm_base: float
    grad_norm_distill: float
    teacher_called: bool


@dataclass(frozen=True)
class EvalLogRow:
    """One validation event; the first eight fields are the CSV log schema."""

    run_id: str
    index: float
    metric: float
    lambda_eff: float
    gate_active: bool
    grad_norm_base: float
    grad_norm_distill: float
    wall_time: float
    counter: int = 0
    l_base: float = float("nan")
    l_distill: float = float("nan")
    temperature: float = float("nan")
    step: int = 0
    batch_fingerprint: str = ""

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def teacher_forward(teacher: FrozenTeacher, batch: Batch):
    return teacher.forward(batch.inputs)


def train_step(params: ModelParams, spec: ModelSpec, optimizer, opt_state, batch: Batch,
               teacher: FrozenTeacher | None, config: DistillConfig, gate: GateState | None,
               u: float, objective, teacher_fn: Callable | None = None, lr: float | None = None):
    """Single optimizer step on the composed loss.

    The teacher is queried once for this batch when the gate is open and
    ``gamma * lambda > 0``; otherwise not at all. Returns ``(params, opt_state, StepLog)``.
    """
    out, cache = forward(params, spec, batch.inputs, return_cache=True)
    l_base, up_base = objective.base(out, batch)
    active = teacher is not None and gate is not None and gate.active_a
    lam = effective_lambda(config, gate, u) if active else 0.0
    temperature = temperature_at(config.temperature, u)
    l_distill, up_distill = 0.0, None
    called = False
    if active and config.gamma > 0 and lam > 0:
        t_out = (teacher_fn or teacher_forward)(teacher, batch)
        called = True
        l_distill, up_distill = objective.distill(out, t_out, batch, temperature)
    compose_loss(l_base, l_distill, config.gamma, lam)

    grads = backward(params, spec, batch.inputs, up_base, cache=cache)
    norm_base = grads.norm()
    norm_distill = 0.0
    coef = config.gamma * lam
    if up_distill is not None:
        g_distill = backward(params, spec, batch.inputs, up_distill, cache=cache)
        norm_distill = abs(coef) * g_distill.norm()
        if coef != 0:
            grads = grads.zip_map(g_distill, lambda a, b: a + coef * b)
    if not (math.isfinite(norm_base) and math.isfinite(norm_distill)):
        raise DivergenceError("non-finite gradient")
    opt_state, params = optimizer.step(opt_state, params, grads, lr=lr)
    row = StepLog(u, l_base, l_distill, lam, temperature, norm_base, norm_distill, called)
    return params, opt_state, row


def lr_at(base_lr: float, schedule: str, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "constant":
        return base_lr
    if schedule == "cosine":
        frac = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
        return 0.5 * base_lr * (1 + math.cos(math.pi * min(frac, 1.0)))
    raise ValueError(f"unknown lr schedule {schedule!r}")


@dataclass
class LoopResult:
    params: ModelParams
    opt_state: Any
    gate: GateState | None
    history: list[EvalLogRow] = field(default_factory=list)
    teacher_calls: int = 0
    steps: int = 0
    trajectory: list[str] = field(default_factory=list)
    stopped_early: bool = False


def run_loop(params: ModelParams, spec: ModelSpec, optimizer, objective, *,
             batch_at: Callable[[int], Batch], total_steps: int, eval_steps: Sequence[int],
             index_of: Callable[[int], float], u_of: Callable[[int], float],
             evaluate: Callable[[ModelParams], float], direction: MetricDirection,
             config: DistillConfig, teacher: FrozenTeacher | None = None,
             m_ref: float | None = None, teacher_fn: Callable | None = None,
             lr: float | None = None, lr_schedule: str = "constant", warmup_steps: int = 0,
             run_id: str = "run", on_eval: Callable | None = None,
             record_trajectory: bool = False) -> LoopResult:
    """Train for ``total_steps`` optimizer steps, validating after each step in ``eval_steps``.

    The gate is replayed on every arm whenever ``m_ref`` is known, so baseline
    logs also show when the teacher level is reached; only arms with a
    teacher ever apply the distillation term.
    """
    eval_steps = sorted(set(int(s) for s in eval_steps))
    gate = config.initial_gate(m_ref, direction) if m_ref is not None else None
    opt_state = optimizer.init(params)
    base_lr = lr if lr is not None else optimizer.lr
    result = LoopResult(params, opt_state, gate)
    window: list[StepLog] = []
    fp = hashlib.sha256()
    start = time.perf_counter()
    next_eval = iter(eval_steps)
    upcoming = next(next_eval, None)
    for step in range(total_steps):
        batch = batch_at(step)
        fp.update(batch.fingerprint.encode())
        step_lr = lr_at(base_lr, lr_schedule, step, total_steps, warmup_steps)
        params, opt_state, row = train_step(
            params, spec, optimizer, opt_state, batch, teacher, config,
            gate if teacher is not None else None, u_of(step), objective, teacher_fn, step_lr)
        result.teacher_calls += row.teacher_called
        if record_trajectory:
            result.trajectory.append(params.fingerprint())
        window.append(row)
        if upcoming is not None and step + 1 == upcoming:
            metric = float(evaluate(params))
            if gate is not None:
                gate = gate_update(gate, metric)
            eval_row = EvalLogRow(
                run_id=run_id, index=index_of(step + 1), metric=metric,
                lambda_eff=row.lambda_eff, gate_active=bool(gate.active_a) if gate else False,
                grad_norm_base=float(np.mean([r.grad_norm_base for r in window])),
                grad_norm_distill=float(np.mean([r.grad_norm_distill for r in window])),
                wall_time=time.perf_counter() - start,
                counter=gate.counter_c if gate else 0,
                l_base=float(np.mean([r.l_base for r in window])),
                l_distill=float(np.mean([r.l_distill for r in window])),
                temperature=row.temperature, step=step + 1,
                batch_fingerprint=fp.hexdigest()[:16])
            result.history.append(eval_row)
            window = []
            upcoming = next(next_eval, None)
            if on_eval is not None and on_eval(params, eval_row):
                result.stopped_early = True
                result.steps = step + 1
                break
        result.steps = step + 1
    result.params, result.opt_state, result.gate = params, opt_state, gate
    return result
