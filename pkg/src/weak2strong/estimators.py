"""scikit-learn compatible estimators wrapping the distillation training loop.

``EarlyDistillClassifier`` trains a numpy MLP or small conv net with
cross-entropy, optionally guided by a frozen teacher early in training.
``EarlyDistillDenoiser`` does the same for a noise-prediction network on
low-dimensional point clouds. Without a teacher both are plain baselines.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .cache import TeacherCache
from .metrics import MetricSeries
from .models import FrozenTeacher, ModelSpec, features, forward, init_params
from .optim import make_optimizer
from .schedule import DistillConfig, LambdaSchedule, MetricDirection, TemperatureSchedule
from .training import Batch, ClassificationObjective, DenoisingObjective, run_loop


class _DistillParamsMixin:
    """Shared construction of distillation and optimizer objects from flat params."""

    def _distill_config(self) -> DistillConfig:
        temp_end = self.temp_decay_end if self.temp_decay_end is not None else self.decay_end
        return DistillConfig(
            gamma=self.gamma,
            schedule=LambdaSchedule(self.warmup_end, self.hold_end, self.decay_end, self.lambda_max),
            temperature=TemperatureSchedule(self.t_start, self.t_end, temp_end),
            stop_k=math.inf if self.stop_k is None else self.stop_k,
            kl_direction=self.kl_direction,
        )

    def _optimizer(self):
        kwargs = {"lr": self.lr, "weight_decay": self.weight_decay}
        if self.optimizer == "sgd":
            kwargs["momentum"] = self.momentum
        elif self.optimizer == "muon":
            kwargs["momentum"] = self.momentum
            kwargs["adamw_lr"] = self.adamw_lr
        return make_optimizer(self.optimizer, **kwargs)

    def _dtype(self):
        return np.dtype(self.dtype)

    def _check_teacher(self, teacher, spec: ModelSpec):
        if teacher is None:
            return
        if not isinstance(teacher, FrozenTeacher):
            raise TypeError("teacher must be a FrozenTeacher")
        if teacher.spec.output_dim != spec.output_dim:
            raise ValueError(f"teacher output_dim {teacher.spec.output_dim} != student {spec.output_dim}")

    @property
    def metric_series_(self) -> MetricSeries:
        check_is_fitted(self, "history_")
        return MetricSeries(tuple(r.index for r in self.history_), tuple(r.metric for r in self.history_),
                            self._direction)

    @property
    def gate_off_index_(self):
        """Training index of the validation at which the gate closed (``None`` if it never did)."""
        check_is_fitted(self, "history_")
        gate = self.gate_
        if gate is None or gate.off_at is None or self.teacher is None:
            return None
        return self.history_[gate.off_at - 1].index


class EarlyDistillClassifier(_DistillParamsMixin, ClassifierMixin, BaseEstimator):
    """Classifier trained with early, gated weak-teacher distillation.

    Schedule boundaries (``warmup_end``, ``hold_end``, ``decay_end``) are in
    epochs; the schedule is evaluated at fractional epochs.

    Parameters
    ----------
    teacher : FrozenTeacher or None
        ``None`` trains the plain baseline.
    hidden : tuple of int
        Hidden widths. For ``family="tiny_conv"`` the first entry is the
        number of conv filters.
    stop_k : int or None
        Consecutive surpassing validations that close the gate; ``None``
        never closes it.
    validation_fraction : float
        Holdout used for the gate when ``fit`` gets no explicit validation set.
    """

    _direction = MetricDirection.HIGHER

    def __init__(self, teacher=None, hidden=(64, 64), family="mlp", gamma=1.0, lambda_max=1.0,
                 warmup_end=1.0, hold_end=3.0, decay_end=8.0, t_start=6.0, t_end=1.0,
                 temp_decay_end=None, stop_k=2, kl_direction="forward", label_smoothing=0.0,
                 optimizer="adamw", lr=1e-3, momentum=0.9, weight_decay=0.0, adamw_lr=1e-3,
                 lr_schedule="constant", batch_size=128, max_epochs=20, eval_every=1,
                 validation_fraction=0.2, teacher_cache=None, dtype="float32", random_state=0,
                 data_seed=None):
        self.teacher = teacher
        self.hidden = hidden
        self.family = family
        self.gamma = gamma
        self.lambda_max = lambda_max
        self.warmup_end = warmup_end
        self.hold_end = hold_end
        self.decay_end = decay_end
        self.t_start = t_start
        self.t_end = t_end
        self.temp_decay_end = temp_decay_end
        self.stop_k = stop_k
        self.kl_direction = kl_direction
        self.label_smoothing = label_smoothing
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.adamw_lr = adamw_lr
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_every = eval_every
        self.validation_fraction = validation_fraction
        self.teacher_cache = teacher_cache
        self.dtype = dtype
        self.random_state = random_state
        self.data_seed = data_seed

    def _prepare(self, X):
        if self.family == "tiny_conv":
            X = np.asarray(X)
            if X.ndim != 4:
                raise ValueError("tiny_conv expects inputs of shape (n, C, H, W)")
            check_array(X.reshape(len(X), -1))
            return X.astype(self._dtype(), copy=False)
        return check_array(X, dtype=self._dtype())

    def _spec(self, X) -> ModelSpec:
        input_dim = X.shape[1:] if self.family == "tiny_conv" else X.shape[1]
        return ModelSpec(self.family, tuple(self.hidden), input_dim, len(self.classes_), self.random_state)

    def fit(self, X, y, X_val=None, y_val=None, on_eval=None, record_trajectory=False):
        """Train. ``on_eval(params, row)`` may return True to stop early."""
        if self.family == "tiny_conv":
            X = np.asarray(X)
            check_X_y(X.reshape(len(X), -1), y)
        else:
            X, y = check_X_y(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if X_val is None:
            X, X_val, y_enc, yv_enc = train_test_split(
                X, y_enc, test_size=self.validation_fraction, random_state=self.random_state,
                stratify=y_enc)
        else:
            yv_enc = np.searchsorted(self.classes_, y_val)
            if np.any(self.classes_[np.clip(yv_enc, 0, len(self.classes_) - 1)] != y_val):
                raise ValueError("validation labels contain classes unseen in training")
        X = self._prepare(X)
        X_val = self._prepare(X_val)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        spec = self._spec(X)
        self._check_teacher(self.teacher, spec)
        config = self._distill_config()
        opt = self._optimizer()
        objective = ClassificationObjective(self.label_smoothing, config.kl_direction)
        n = len(X)
        spe = math.ceil(n / self.batch_size)
        seed = self.random_state if self.data_seed is None else self.data_seed
        perms: dict[int, np.ndarray] = {}

        def batch_at(step):
            epoch, b = divmod(step, spe)
            if epoch not in perms:
                perms.clear()
                perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
            idx = perms[epoch][b * self.batch_size:(b + 1) * self.batch_size]
            fp = hashlib.blake2b(idx.tobytes(), digest_size=8).hexdigest()
            return Batch(X[idx], y_enc[idx], (epoch, b), fp)

        def evaluate(params):
            pred = forward(params, spec, X_val).argmax(axis=1)
            return float(np.mean(pred == yv_enc))

        m_ref = None
        teacher = self.teacher
        if teacher is not None:
            m_ref = float(np.mean(teacher.forward(X_val).argmax(axis=1) == yv_enc))
        self.teacher_metric_ = m_ref
        teacher_fn = None
        if isinstance(self.teacher_cache, TeacherCache):
            ds_fp = hashlib.blake2b(X.tobytes(), digest_size=8).hexdigest()
            teacher_fn = self.teacher_cache.teacher_fn(ds_fp, seed)

        total = spe * self.max_epochs
        eval_steps = [e * spe for e in range(self.eval_every, self.max_epochs + 1, self.eval_every)]
        params = init_params(spec, self._dtype())
        self.spec_ = spec
        result = run_loop(
            params, spec, opt, objective, batch_at=batch_at, total_steps=total,
            eval_steps=eval_steps, index_of=lambda s: s // spe if s % spe == 0 else s / spe,
            u_of=lambda s: s / spe, evaluate=evaluate, direction=self._direction, config=config,
            teacher=teacher, m_ref=m_ref, teacher_fn=teacher_fn, lr_schedule=self.lr_schedule,
            run_id=f"{'ours' if teacher is not None else 'base'}-{self.random_state}",
            on_eval=on_eval, record_trajectory=record_trajectory)
        self.params_ = result.params
        self.gate_ = result.gate
        self.history_ = result.history
        self.teacher_calls_ = result.teacher_calls
        self.n_iter_ = result.steps
        self.trajectory_ = result.trajectory
        self.steps_per_epoch_ = spe
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, self.spec_, self._prepare(X))

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64), axis=1)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def features(self, X):
        """Penultimate-layer activations, e.g. for CKA against a teacher."""
        check_is_fitted(self, "params_")
        return features(self.params_, self.spec_, self._prepare(X))

    def to_teacher(self, reference_metric=float("nan"), **meta) -> FrozenTeacher:
        check_is_fitted(self, "params_")
        return FrozenTeacher(self.params_, self.spec_, reference_metric, meta)


def linear_noise_schedule(t_max: int, beta_start: float, beta_end: float):
    betas = np.linspace(beta_start, beta_end, t_max)
    return betas, np.cumprod(1.0 - betas)


class EarlyDistillDenoiser(_DistillParamsMixin, BaseEstimator):
    """DDPM-style noise predictor with early, gated teacher distillation.

    Schedule boundaries are in optimizer steps. The validation metric is the
    held-out noise-prediction MSE on a fixed set of ``(t, noise)`` draws
    (lower is better).
    """

    _direction = MetricDirection.LOWER

    def __init__(self, teacher=None, hidden=(128, 128), embed_dim=16, t_max=100,
                 beta_start=1e-3, beta_end=0.2, mask_ratio=0.5, mask_mode="early", gamma=1.0,
                 lambda_max=1.0, warmup_end=100, hold_end=1000, decay_end=3000, t_start=1.0,
                 t_end=1.0, temp_decay_end=None, stop_k=2, kl_direction="forward",
                 optimizer="adamw", lr=1e-3, momentum=0.9, weight_decay=0.0, adamw_lr=1e-3,
                 lr_schedule="constant", batch_size=256, max_steps=6000, eval_every=500,
                 val_repeats=4, val_seed=12345, dtype="float32", random_state=0, data_seed=None):
        self.teacher = teacher
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.t_max = t_max
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.mask_ratio = mask_ratio
        self.mask_mode = mask_mode
        self.gamma = gamma
        self.lambda_max = lambda_max
        self.warmup_end = warmup_end
        self.hold_end = hold_end
        self.decay_end = decay_end
        self.t_start = t_start
        self.t_end = t_end
        self.temp_decay_end = temp_decay_end
        self.stop_k = stop_k
        self.kl_direction = kl_direction
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.adamw_lr = adamw_lr
        self.lr_schedule = lr_schedule
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.eval_every = eval_every
        self.val_repeats = val_repeats
        self.val_seed = val_seed
        self.dtype = dtype
        self.random_state = random_state
        self.data_seed = data_seed

    def _noised(self, x0, t, eps):
        ab = self.alpha_bars_[t][:, None]
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps

    def _validation_set(self, X_val):
        rng = np.random.default_rng(self.val_seed)
        x0 = np.repeat(X_val, self.val_repeats, axis=0)
        t = rng.integers(0, self.t_max, size=len(x0))
        eps = rng.normal(size=x0.shape)
        return (self._noised(x0, t, eps).astype(self._dtype()), t), eps.astype(self._dtype())

    def denoising_loss(self, X, params=None, spec=None):
        """Held-out noise-prediction MSE on the fixed validation draws."""
        X = check_array(X, dtype=np.float64)
        inputs, eps = self._validation_set(X)
        params = self.params_ if params is None else params
        pred = forward(params, spec or self.spec_, inputs)
        return float(np.mean((pred.astype(np.float64) - eps) ** 2))

    def fit(self, X, X_val=None, on_eval=None, record_trajectory=False):
        X = check_array(X, dtype=np.float64)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            idx = rng.permutation(len(X))
            cut = max(1, len(X) // 5)
            X_val, X = X[idx[:cut]], X[idx[cut:]]
        X_val = check_array(X_val, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        _, self.alpha_bars_ = linear_noise_schedule(self.t_max, self.beta_start, self.beta_end)
        spec = ModelSpec("tiny_denoiser", tuple(self.hidden), X.shape[1], X.shape[1],
                         self.random_state, self.embed_dim)
        self._check_teacher(self.teacher, spec)
        config = self._distill_config()
        objective = DenoisingObjective(self.t_max, self.mask_ratio, self.mask_mode)
        seed = self.random_state if self.data_seed is None else self.data_seed
        dtype = self._dtype()
        n = len(X)

        def batch_at(step):
            rng = np.random.default_rng([seed, step])
            idx = rng.integers(0, n, size=self.batch_size)
            t = rng.integers(0, self.t_max, size=self.batch_size)
            eps = rng.normal(size=(self.batch_size, X.shape[1]))
            x_t = self._noised(X[idx], t, eps)
            fp = hashlib.blake2b(idx.tobytes() + t.tobytes(), digest_size=8).hexdigest()
            return Batch((x_t.astype(dtype), t), eps.astype(dtype), (step,), fp)

        val_inputs, val_eps = self._validation_set(X_val)

        def evaluate(params):
            pred = forward(params, spec, val_inputs)
            return float(np.mean((pred.astype(np.float64) - val_eps) ** 2))

        m_ref = None
        if self.teacher is not None:
            pred = self.teacher.forward(val_inputs)
            m_ref = float(np.mean((pred.astype(np.float64) - val_eps) ** 2))
        self.teacher_metric_ = m_ref
        eval_steps = list(range(self.eval_every, self.max_steps + 1, self.eval_every))
        self.spec_ = spec
        result = run_loop(
            init_params(spec, dtype), spec, self._optimizer(), objective, batch_at=batch_at,
            total_steps=self.max_steps, eval_steps=eval_steps, index_of=lambda s: s,
            u_of=lambda s: float(s), evaluate=evaluate, direction=self._direction, config=config,
            teacher=self.teacher, m_ref=m_ref, lr_schedule=self.lr_schedule,
            run_id=f"{'ours' if self.teacher is not None else 'base'}-{self.random_state}",
            on_eval=on_eval, record_trajectory=record_trajectory)
        self.params_ = result.params
        self.gate_ = result.gate
        self.history_ = result.history
        self.teacher_calls_ = result.teacher_calls
        self.n_iter_ = result.steps
        self.trajectory_ = result.trajectory
        return self

    def predict_noise(self, x_t, t):
        check_is_fitted(self, "params_")
        x_t = check_array(x_t, dtype=self._dtype())
        return forward(self.params_, self.spec_, (x_t, np.asarray(t)))

    def score(self, X):
        return -self.denoising_loss(X)

    def sample(self, n_samples: int, random_state=0):
        """Ancestral DDPM sampling from pure noise."""
        check_is_fitted(self, "params_")
        betas, alpha_bars = linear_noise_schedule(self.t_max, self.beta_start, self.beta_end)
        alphas = 1.0 - betas
        rng = np.random.default_rng(random_state)
        x = rng.normal(size=(n_samples, self.n_features_in_))
        for t in reversed(range(self.t_max)):
            tt = np.full(n_samples, t)
            eps = forward(self.params_, self.spec_, (x.astype(self._dtype()), tt)).astype(np.float64)
            x = (x - betas[t] / np.sqrt(1 - alpha_bars[t]) * eps) / np.sqrt(alphas[t])
            if t > 0:
                x = x + np.sqrt(betas[t]) * rng.normal(size=x.shape)
        return x

    def to_teacher(self, reference_metric=float("nan"), **meta) -> FrozenTeacher:
        check_is_fitted(self, "params_")
        return FrozenTeacher(self.params_, self.spec_, reference_metric, meta)
