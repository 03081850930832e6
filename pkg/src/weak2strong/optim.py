"""SGD with momentum, AdamW and Muon as pure state transitions.

Each optimizer exposes ``init(params) -> state`` and
``step(state, params, grads) -> (state, params)``; inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import DivergenceError
from .models import ModelParams

# Quintic Newton-Schulz coefficients from the Muon reference implementation.
NS_COEFFS = (3.4445, -4.7750, 2.0315)


def newton_schulz(m: np.ndarray, iters: int = 5, coeffs=NS_COEFFS) -> np.ndarray:
    """Approximate the orthogonal polar factor of ``m``.

    The caller normalises ``m`` to unit Frobenius norm. Singular vectors are
    preserved; singular values are pushed into a band around 1.
    """
    if iters < 1:
        raise ValueError("iters must be positive")
    x = np.asarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("newton_schulz expects a matrix")
    a, b, c = coeffs
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    for _ in range(iters):
        gram = x @ x.T
        x = a * x + (b * gram + c * gram @ gram) @ x
        if not np.all(np.isfinite(x)):
            raise DivergenceError("non-finite Newton-Schulz iterate")
    return x.T if transposed else x


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    step: int = 0
    buffers: dict = field(default_factory=dict)


def _check(params: ModelParams, grads: ModelParams) -> None:
    params.check_compatible(grads)


@dataclass(frozen=True)
class SGD:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0

    kind = "sgd"

    def init(self, params: ModelParams) -> OptimizerState:
        return OptimizerState(self.kind, 0, {"v": params.map(np.zeros_like)})

    def step(self, state: OptimizerState, params: ModelParams, grads: ModelParams, lr: float | None = None):
        _check(params, grads)
        lr = self.lr if lr is None else lr
        v = state.buffers["v"].zip_map(grads, lambda v, g: self.momentum * v + g)
        new = {}
        for k, p in params.items():
            upd = p - lr * v[k]
            if self.weight_decay:
                upd = upd - lr * self.weight_decay * p
            new[k] = upd.astype(p.dtype, copy=False)
        return replace(state, step=state.step + 1, buffers={"v": v}), ModelParams(new)


@dataclass(frozen=True)
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    kind = "adamw"

    def init(self, params: ModelParams) -> OptimizerState:
        zeros = params.map(np.zeros_like)
        return OptimizerState(self.kind, 0, {"m": zeros, "v": zeros.copy()})

    def _update(self, p, g, m, v, t, lr):
        b1, b2 = self.betas
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p_new = p - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)
        return p_new.astype(p.dtype, copy=False), m, v

    def step(self, state: OptimizerState, params: ModelParams, grads: ModelParams, lr: float | None = None):
        _check(params, grads)
        lr = self.lr if lr is None else lr
        t = state.step + 1
        new_p, new_m, new_v = {}, {}, {}
        for k, p in params.items():
            new_p[k], new_m[k], new_v[k] = self._update(p, grads[k], state.buffers["m"][k],
                                                        state.buffers["v"][k], t, lr)
        buffers = {"m": ModelParams(new_m), "v": ModelParams(new_v)}
        return replace(state, step=t, buffers=buffers), ModelParams(new_p)


@dataclass(frozen=True)
class Muon:
    """Orthogonalised momentum for matrices, AdamW for vectors.

    Matrix update: ``B = mu*B + g``; ``O = NS(B / ||B||_F)``;
    ``p -= lr * scale * O`` with ``scale = sqrt(max(1, rows/cols))``.
    """

    lr: float = 0.02
    momentum: float = 0.95
    nesterov: bool = False
    ns_iterations: int = 5
    weight_decay: float = 0.0
    adamw_lr: float = 1e-3
    adamw_betas: tuple[float, float] = (0.9, 0.999)
    adamw_eps: float = 1e-8

    kind = "muon"

    @property
    def fallback(self) -> AdamW:
        return AdamW(self.adamw_lr, self.adamw_betas, self.adamw_eps, self.weight_decay)

    def init(self, params: ModelParams) -> OptimizerState:
        zeros = params.map(np.zeros_like)
        return OptimizerState(self.kind, 0, {"B": zeros, "m": zeros.copy(), "v": zeros.copy()})

    def orthogonal_update(self, buf: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(buf)
        if norm == 0:
            return np.zeros_like(buf)
        o = newton_schulz(buf / norm, self.ns_iterations)
        rows, cols = buf.shape
        return np.sqrt(max(1.0, rows / cols)) * o

    def step(self, state: OptimizerState, params: ModelParams, grads: ModelParams, lr: float | None = None):
        _check(params, grads)
        lr = self.lr if lr is None else lr
        lr_scale = lr / self.lr if self.lr else 1.0
        t = state.step + 1
        fb = self.fallback
        new_p, new_b, new_m, new_v = {}, {}, {}, {}
        for k, p in params.items():
            g = grads[k]
            b, m, v = state.buffers["B"][k], state.buffers["m"][k], state.buffers["v"][k]
            if p.ndim == 2:
                b = self.momentum * b + g
                direction = g + self.momentum * b if self.nesterov else b
                o = self.orthogonal_update(direction)
                upd = p - lr * o
                if self.weight_decay:
                    upd = upd - lr * self.weight_decay * p
                new_p[k] = upd.astype(p.dtype, copy=False)
            else:
                new_p[k], m, v = fb._update(p, g, m, v, t, fb.lr * lr_scale)
            new_b[k], new_m[k], new_v[k] = b, m, v
        buffers = {"B": ModelParams(new_b), "m": ModelParams(new_m), "v": ModelParams(new_v)}
        return replace(state, step=t, buffers=buffers), ModelParams(new_p)


OPTIMIZERS = {"sgd": SGD, "adamw": AdamW, "muon": Muon}


def make_optimizer(name: str, **kwargs):
    try:
        cls = OPTIMIZERS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None
    if "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    return cls(**kwargs)
