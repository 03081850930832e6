"""Experiment orchestration: configs, teacher training, paired runs and band sweeps.

A paired run trains a baseline and a distilled student per seed with the
same initialisation, batch order and optimizer; the only difference is the
added distillation term. Every seed gets its own run directory holding the
config snapshot, the per-validation log CSV, a JSON report and an SVG plot.
"""

from __future__ import annotations

import copy
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import losses
from .data import Dataset, gaussian_mixture_classes, read_cifar10_files, swirl_2d, synthetic_anchors
from .estimators import EarlyDistillClassifier, EarlyDistillDenoiser
from .exceptions import ConfigError, DivergenceError
from .metrics import CrossingRule, classify_teacher_band, first_at_tau
from .models import FrozenTeacher, save_checkpoint
from .reporting import RunReport, emit_report, plot_band, plot_curves, write_log_csv

log = logging.getLogger(__name__)

TASKS = ("classification", "diffusion", "detection")

DEFAULTS: dict[str, dict[str, Any]] = {
    "classification": {
        "data": {"kind": "gaussian_mixture", "n_train": 10_000, "n_val": 2_000, "train_seed": 1,
                 "val_seed": 2, "centers_seed": 0, "train_label_noise": 0.3,
                 "params": {"n_classes": 10, "dim": 16, "clusters_per_class": 8,
                            "separation": 2.0, "cluster_std": 1.5}},
        "student": {"family": "mlp", "widths": [64, 64]},
        "teacher": {"checkpoint": None, "stage": -1,
                    "train": {"family": "mlp", "widths": [32, 32], "epochs": 60, "seed": 100,
                              "stages": [20, 40, 60], "stop_at": None}},
        "distill": {"gamma": 2.0, "lambda_max": 1.0, "warmup_end": 0.5, "hold_end": 12.0,
                    "decay_end": 20.0, "t_start": 1.0, "t_end": 1.0, "temp_decay_end": None,
                    "stop_k": 2, "kl_direction": "forward", "label_smoothing": 0.0},
        "optimizer": {"name": "adamw", "lr": 1e-3, "momentum": 0.9, "weight_decay": 0.0,
                      "adamw_lr": 1e-3, "lr_schedule": "constant"},
        "budget": {"epochs": 25, "batch_size": 128, "eval_every": 1},
        "crossing": {"tau": "teacher", "consecutive_hits": 1},
    },
    "diffusion": {
        "data": {"kind": "swirl", "n_train": 4000, "n_val": 1000, "train_seed": 1, "val_seed": 2,
                 "params": {"noise": 0.05, "turns": 1.5}},
        "student": {"family": "tiny_denoiser", "widths": [128, 128], "embed_dim": 16},
        "teacher": {"checkpoint": None, "stage": -1,
                    "train": {"family": "tiny_denoiser", "widths": [32, 32], "embed_dim": 16,
                              "steps": 6000, "seed": 100, "stages": [2000, 4000, 6000],
                              "stop_at": None}},
        "distill": {"gamma": 1.0, "lambda_max": 1.0, "warmup_end": 100, "hold_end": 1500,
                    "decay_end": 3000, "stop_k": 2, "mask_ratio": 0.5, "mask_mode": "early",
                    "t_max": 100, "beta_start": 1e-3, "beta_end": 0.2},
        "optimizer": {"name": "adamw", "lr": 1e-3, "momentum": 0.9, "weight_decay": 0.0,
                      "adamw_lr": 1e-3, "lr_schedule": "constant"},
        "budget": {"steps": 6000, "batch_size": 256, "eval_every": 500},
        "crossing": {"tau": "teacher", "consecutive_hits": 2},
    },
    "detection": {
        "data": {"kind": "anchors", "params": {"n_anchors": 512, "n_classes": 8,
                                               "disagreement": 0.5, "background_fraction": 0.7}},
        "distill": {"temperature": 2.0, "score_threshold": 0.2, "beta": 1.0,
                    "thresholds": [0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9]},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict) and key != "params" and base[key] is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key!r} must be a mapping")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    task: str = "classification"
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs"
    data: dict = field(default_factory=dict)
    student: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    budget: dict = field(default_factory=dict)
    crossing: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw = dict(raw)
        task = raw.pop("task", "classification")
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
        top = {k: raw.pop(k) for k in ("name", "seeds", "output_dir", "sweep") if k in raw}
        sections = _merge(DEFAULTS[task], raw)
        cfg = cls(task=task, base_dir=str(base_dir), **top, **sections)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        if self.task == "detection":
            for key in ("student", "teacher", "optimizer", "budget", "crossing"):
                d.pop(key, None)
        return d

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of integers")
        if self.task == "detection":
            return
        b = self.budget
        unit = "epochs" if self.task == "classification" else "steps"
        if not isinstance(b.get(unit), int) or b[unit] <= 0:
            raise ConfigError(f"budget.{unit} must be a positive integer")
        if not isinstance(b.get("eval_every"), int) or not 0 < b["eval_every"] <= b[unit]:
            raise ConfigError("budget.eval_every must be a positive integer within the budget")
        if b["batch_size"] <= 0:
            raise ConfigError("budget.batch_size must be positive")
        tau = self.crossing.get("tau")
        if tau != "teacher" and not isinstance(tau, (int, float)):
            raise ConfigError("crossing.tau must be a number or 'teacher'")
        if int(self.crossing.get("consecutive_hits", 1)) < 1:
            raise ConfigError("crossing.consecutive_hits must be >= 1")
        d = self.distill
        if not 0 <= d["warmup_end"] <= d["hold_end"] <= d["decay_end"]:
            raise ConfigError("distill schedule must satisfy 0 <= warmup_end <= hold_end <= decay_end")
        if d["gamma"] < 0:
            raise ConfigError("distill.gamma must be nonnegative")
        ckpt = self.teacher.get("checkpoint")
        if ckpt is not None and not self.resolve(ckpt).exists():
            raise ConfigError(f"teacher checkpoint {ckpt} does not exist")
        if self.data.get("kind") == "cifar10":
            for key in ("train_files", "val_files"):
                files = self.data.get(key) or []
                if not files:
                    raise ConfigError(f"data.{key} is required for cifar10")
                for f in files:
                    if not self.resolve(f).exists():
                        raise ConfigError(f"data file {f} does not exist")

    @property
    def unit(self) -> str:
        return "ep" if self.task == "classification" else "step"


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = config.data
    kind = d["kind"]
    if kind == "gaussian_mixture":
        p = dict(d.get("params") or {})
        train = gaussian_mixture_classes(d["n_train"], seed=d["train_seed"], centers_seed=d["centers_seed"],
                                         label_noise=d.get("train_label_noise", 0.0), **p)
        val = gaussian_mixture_classes(d["n_val"], seed=d["val_seed"], centers_seed=d["centers_seed"], **p)
        return train, val
    if kind == "swirl":
        p = dict(d.get("params") or {})
        return swirl_2d(d["n_train"], seed=d["train_seed"], **p), swirl_2d(d["n_val"], seed=d["val_seed"], **p)
    if kind == "cifar10":
        train = read_cifar10_files([config.resolve(f) for f in d["train_files"]])
        val = read_cifar10_files([config.resolve(f) for f in d["val_files"]])
        return train, val
    raise ConfigError(f"unknown data kind {kind!r} for task {config.task}")


def _describe(spec_cfg: dict) -> str:
    return f"{spec_cfg.get('family', 'mlp')}-{'x'.join(str(w) for w in spec_cfg.get('widths', []))}"


def make_estimator(config: ExperimentConfig, seed: int, teacher: FrozenTeacher | None,
                   spec_cfg: dict | None = None, budget: int | None = None, **overrides):
    """Build the task's estimator from config sections; ``teacher=None`` gives the baseline."""
    spec_cfg = spec_cfg or config.student
    d, o, b = config.distill, config.optimizer, config.budget
    common = dict(
        teacher=teacher, hidden=tuple(spec_cfg["widths"]), gamma=d["gamma"],
        lambda_max=d["lambda_max"], warmup_end=d["warmup_end"], hold_end=d["hold_end"],
        decay_end=d["decay_end"], stop_k=d["stop_k"], kl_direction=d.get("kl_direction", "forward"),
        optimizer=o["name"], lr=o["lr"], momentum=o["momentum"], weight_decay=o["weight_decay"],
        adamw_lr=o["adamw_lr"], lr_schedule=o["lr_schedule"], batch_size=b["batch_size"],
        eval_every=b["eval_every"], random_state=seed)
    if config.task == "classification":
        est = EarlyDistillClassifier(
            family=spec_cfg.get("family", "mlp"), t_start=d["t_start"], t_end=d["t_end"],
            temp_decay_end=d["temp_decay_end"], label_smoothing=d["label_smoothing"],
            max_epochs=budget or b["epochs"], **common)
    else:
        est = EarlyDistillDenoiser(
            embed_dim=spec_cfg.get("embed_dim", 16), t_max=d["t_max"], beta_start=d["beta_start"],
            beta_end=d["beta_end"], mask_ratio=d["mask_ratio"], mask_mode=d["mask_mode"],
            max_steps=budget or b["steps"], **common)
    return est.set_params(**overrides) if overrides else est


def _fit(est, train: Dataset, val: Dataset, **kw):
    if isinstance(est, EarlyDistillClassifier):
        return est.fit(train.X, train.y, val.X, val.y, **kw)
    return est.fit(train.X, val.X, **kw)


@dataclass
class TeacherStage:
    index: int
    metric: float
    path: str


@dataclass
class TeacherTrainingResult:
    stages: list[TeacherStage]
    best: TeacherStage
    reached_target: bool

    def teacher(self, stage: int = -1) -> FrozenTeacher:
        return FrozenTeacher.load(self.stages[stage].path)


def train_teacher(config: ExperimentConfig, out_dir, train: Dataset | None = None,
                  val: Dataset | None = None, teacher_cfg: dict | None = None) -> TeacherTrainingResult:
    """Train a teacher as a plain baseline and checkpoint it at the configured stages.

    With ``stop_at`` set, training stops once the validation metric reaches
    it (at or below it for lower-is-better tasks); the final state is always
    checkpointed.
    """
    tcfg = dict(teacher_cfg or config.teacher["train"])
    if train is None or val is None:
        train, val = load_datasets(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    unit_key = "epochs" if config.task == "classification" else "steps"
    budget = int(tcfg.get(unit_key) or config.budget[unit_key])
    stages = sorted(set(int(s) for s in (tcfg.get("stages") or []) if 0 < int(s) <= budget) | {budget})
    stop_at = tcfg.get("stop_at")
    higher = config.task == "classification"
    est = make_estimator(config, int(tcfg.get("seed", 0)), None, spec_cfg=tcfg, budget=budget)
    if config.task == "classification":
        est.set_params(eval_every=1)
    saved: list[TeacherStage] = []
    name = tcfg.get("name") or _describe(tcfg)
    reached = False

    def save(params, index, metric):
        path = out_dir / f"teacher-{name}-{config.unit}{int(index)}.npz"
        save_checkpoint(path, est.spec_, params, metric, {"stage_index": index, "name": name})
        saved.append(TeacherStage(int(index), float(metric), str(path)))

    def on_eval(params, row):
        nonlocal reached
        hit = stop_at is not None and (row.metric >= stop_at if higher else row.metric <= stop_at)
        if int(row.index) in stages or hit:
            save(params, row.index, row.metric)
        reached = reached or hit
        return hit

    _fit(est, train, val, on_eval=on_eval)
    last = est.history_[-1]
    if not saved or saved[-1].index != int(last.index):
        save(est.params_, last.index, last.metric)
    pick = max if higher else min
    best = pick(saved, key=lambda s: s.metric)
    if stop_at is not None and not reached:
        log.warning("teacher target %s not reached within budget; best stage %s has metric %.4f",
                    stop_at, best.index, best.metric)
    return TeacherTrainingResult(saved, best, reached or stop_at is None)


def obtain_teacher(config: ExperimentConfig, out_dir, train: Dataset, val: Dataset,
                   teacher_ckpt=None) -> tuple[FrozenTeacher, Path]:
    """Load the configured teacher checkpoint or train one; returns ``(teacher, path)``."""
    ckpt = teacher_ckpt or config.teacher.get("checkpoint")
    if ckpt is not None:
        path = Path(ckpt) if teacher_ckpt is not None else config.resolve(ckpt)
        return FrozenTeacher.load(path), path.resolve()
    result = train_teacher(config, Path(out_dir) / "teacher", train, val)
    stage = result.stages[int(config.teacher.get("stage", -1))]
    return FrozenTeacher.load(stage.path), Path(stage.path).resolve()


def _best(rows, higher: bool) -> float:
    vals = [r.metric for r in rows]
    if not vals:
        return float("nan")
    return max(vals) if higher else min(vals)


@dataclass
class PairResult:
    reports: list[RunReport]
    aggregate: dict
    teacher_metric: float
    tau: float
    histories: dict = field(default_factory=dict)


def resolve_tau(config: ExperimentConfig, teacher_metric: float) -> float:
    tau = config.crossing["tau"]
    return float(teacher_metric) if tau == "teacher" else float(tau)


def aggregate_reports(reports: list[RunReport]) -> dict:
    ok = [r for r in reports if not r.failed]
    base = [r.first_at_tau_base for r in ok if r.first_at_tau_base is not None]
    ours = [r.first_at_tau_ours for r in ok if r.first_at_tau_ours is not None]
    speedups = [r.speedup for r in ok if r.speedup is not None]

    def no_later(r):
        if r.first_at_tau_ours is None:
            return False
        return r.first_at_tau_base is None or r.first_at_tau_ours <= r.first_at_tau_base

    return {
        "n_seeds": len(reports),
        "n_failed": len(reports) - len(ok),
        "median_first_at_tau_base": statistics.median(base) if len(base) == len(ok) and ok else None,
        "median_first_at_tau_ours": statistics.median(ours) if len(ours) == len(ok) and ok else None,
        "median_speedup": statistics.median(speedups) if speedups else None,
        "ours_no_later": sum(no_later(r) for r in ok),
        "speedups": speedups,
    }


def run_pair(config: ExperimentConfig, out_dir=None, teacher: FrozenTeacher | None = None,
             teacher_ckpt=None, tau: float | None = None, data=None, label: str | None = None) -> PairResult:
    """Baseline vs distilled student for every seed in the config."""
    out_dir = Path(out_dir or config.resolve(config.output_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = data or load_datasets(config)
    ckpt_path = None
    if teacher is None:
        teacher, ckpt_path = obtain_teacher(config, out_dir, train, val, teacher_ckpt)
    snapshot = copy.deepcopy(config)
    if ckpt_path is not None:
        # Pin the exact teacher so the run directory alone reproduces the run.
        snapshot.teacher["checkpoint"] = str(ckpt_path)
    if tau is not None:
        snapshot.crossing["tau"] = float(tau)
    for key in ("train_files", "val_files"):
        if snapshot.data.get(key):
            snapshot.data[key] = [str(config.resolve(f).resolve()) for f in snapshot.data[key]]
    higher = config.task == "classification"
    hits = int(config.crossing.get("consecutive_hits", 1))
    reports, histories = [], {}
    teacher_metric = None
    for seed in config.seeds:
        run_dir = out_dir / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot.seeds = [seed]
        snapshot.dump(run_dir / "config.yaml")
        (run_dir / "seed.txt").write_text(f"{seed}\n")
        try:
            base = _fit(make_estimator(config, seed, None), train, val)
            ours = _fit(make_estimator(config, seed, teacher), train, val)
        except DivergenceError as exc:
            log.error("seed %s diverged: %s", seed, exc)
            reports.append(RunReport(config.data["kind"], _describe(config.student),
                                     label or _describe(teacher.spec.to_dict()), config.optimizer["name"],
                                     float("nan"), float("nan"), seed, None, None, None, float("nan"),
                                     float("nan"), str(run_dir), config.unit, True, str(exc)))
            continue
        teacher_metric = ours.teacher_metric_
        run_tau = tau if tau is not None else resolve_tau(config, teacher_metric)
        rule = CrossingRule(run_tau, hits)
        rows = base.history_ + ours.history_
        log_path = write_log_csv(run_dir / "log.csv", rows)
        report = RunReport(
            dataset=config.data["kind"], student=_describe(config.student),
            teacher=label or _describe(teacher.spec.to_dict()), optimizer=config.optimizer["name"],
            teacher_metric=teacher_metric, tau=run_tau, seed=seed,
            first_at_tau_base=first_at_tau(base.metric_series_, rule),
            first_at_tau_ours=first_at_tau(ours.metric_series_, rule), speedup=None,
            best_metric_base=_best(base.history_, higher), best_metric_ours=_best(ours.history_, higher),
            log_path=str(log_path), unit=config.unit)
        (run_dir / "report.json").write_text(json.dumps(asdict(report), indent=2))
        plot_curves(run_dir / "curves.svg", {"base": base.history_, "ours": ours.history_}, run_tau,
                    ours.gate_off_index_, xlabel="epoch" if higher else "step",
                    ylabel="val accuracy" if higher else "val denoising MSE")
        reports.append(report)
        histories[seed] = {"base": base.history_, "ours": ours.history_,
                           "gate_off": ours.gate_off_index_, "teacher_calls": ours.teacher_calls_}
    aggregate = aggregate_reports(reports)
    aggregate["teacher_metric"] = teacher_metric
    aggregate["tau"] = reports[0].tau if reports else None
    (out_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=2))
    ok = [r for r in reports if not r.failed]
    if ok:
        emit_report(ok, "table", out_dir / "table.txt")
        emit_report(ok, "csv", out_dir / "reports.csv")
    return PairResult(reports, aggregate, teacher_metric, aggregate["tau"], histories)


def sweep_band(config: ExperimentConfig, out_dir=None, data=None) -> list[dict]:
    """Pair runs for several teachers at a shared target; one row per teacher.

    The target comes from the config's main teacher (or ``crossing.tau``)
    and is held fixed across the sweep so speedups are comparable.
    """
    out_dir = Path(out_dir or config.resolve(config.output_dir)) / "band"
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val = data or load_datasets(config)
    teachers = (config.sweep or {}).get("teachers")
    if not teachers:
        raise ConfigError("sweep.teachers must list at least one teacher training spec")
    edges = tuple((config.sweep or {}).get("band_edges", (-15.0, 0.0)))
    main, _ = obtain_teacher(config, out_dir / "main", train, val)
    higher = config.task == "classification"
    probe = _fit(make_estimator(config, config.seeds[0], main), train, val)
    tau = resolve_tau(config, probe.teacher_metric_)
    rows = []
    for tcfg in teachers:
        tcfg = {**config.teacher["train"], **tcfg}
        name = tcfg.get("name") or _describe(tcfg)
        res = train_teacher(config, out_dir / name, train, val, tcfg)
        ckpt = res.stages[int(tcfg.get("stage_pick", -1))].path
        pair = run_pair(config, out_dir / name, teacher_ckpt=ckpt, tau=tau, data=(train, val), label=name)
        base_best = statistics.median(r.best_metric_base for r in pair.reports if not r.failed)
        if higher:
            band = classify_teacher_band(pair.teacher_metric, base_best, edges)
            gap, regime = band.relative_gap, band.regime.value
        else:
            # Lower-is-better: a weaker teacher has a larger loss, so flip the sign.
            gap = -100.0 * (pair.teacher_metric - base_best) / base_best
            regime = ("too_weak" if gap < edges[0] else "suitably_weaker" if gap < edges[1]
                      else "too_strong")
        rows.append({"teacher": name, "teacher_metric": pair.teacher_metric,
                     "baseline_student_metric": base_best, "relative_gap": gap, "regime": regime,
                     "tau": tau, "median_speedup": pair.aggregate["median_speedup"],
                     "speedups": pair.aggregate["speedups"],
                     "median_first_at_tau_base": pair.aggregate["median_first_at_tau_base"],
                     "median_first_at_tau_ours": pair.aggregate["median_first_at_tau_ours"]})
    (out_dir / "band.json").write_text(json.dumps(rows, indent=2))
    with open(out_dir / "band.csv", "w") as fh:
        keys = [k for k in rows[0] if k != "speedups"]
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join("" if r[k] is None else str(r[k]) for k in keys) + "\n")
    plotted = [r for r in rows if r["median_speedup"] is not None]
    if plotted:
        plot_band(out_dir / "band.svg", [r["relative_gap"] for r in plotted],
                  [r["median_speedup"] for r in plotted], [r["teacher"] for r in plotted], edges)
    return rows


def run_detection(config: ExperimentConfig, out_dir=None) -> dict:
    """Loss-level check of the detection distillation term on synthetic heads."""
    out_dir = Path(out_dir or config.resolve(config.output_dir))
    out_dir.mkdir(parents=True, exist_ok=True)
    d = config.distill
    results = []
    for seed in config.seeds:
        a = synthetic_anchors(seed=seed, **(config.data.get("params") or {}))
        row = {"seed": seed}
        for thr in d["thresholds"]:
            mask, _, _ = losses.det_distill_terms(a["student_cls"], a["student_box"], a["teacher_cls"],
                                                  a["teacher_box"], d["temperature"], thr)
            row[f"masked@{thr}"] = int(mask.sum())
            row[f"loss@{thr}"] = losses.det_distill_loss(
                a["student_cls"], a["student_box"], a["teacher_cls"], a["teacher_box"],
                d["temperature"], thr, d["beta"])
        row["loss_no_box"] = losses.det_distill_loss(
            a["student_cls"], a["student_box"], a["teacher_cls"], a["teacher_box"],
            d["temperature"], d["score_threshold"], 0.0)
        results.append(row)
    summary = {"task": "detection", "temperature": d["temperature"],
               "score_threshold": d["score_threshold"], "beta": d["beta"], "runs": results}
    (out_dir / "detection.json").write_text(json.dumps(summary, indent=2))
    config.dump(out_dir / "config.yaml")
    return summary
