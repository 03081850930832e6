"""Run reports and their table / CSV / JSON / SVG renderings."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import format_speedup, speedup_ratio
from .training import EvalLogRow

TABLE_COLUMNS = ["Dataset", "Student", "Teacher", "Optimizer", "Teacher Metric", "Target τ",
                 "first@τ (Base → Ours)", "Speedup", "Best Metric (Base / Ours)"]


@dataclass
class RunReport:
    dataset: str
    student: str
    teacher: str
    optimizer: str
    teacher_metric: float
    tau: float
    seed: int
    first_at_tau_base: float | None
    first_at_tau_ours: float | None
    speedup: float | None
    best_metric_base: float
    best_metric_ours: float
    log_path: str = ""
    unit: str = "ep"
    failed: bool = False
    error: str = ""

    def __post_init__(self):
        both = self.first_at_tau_base is not None and self.first_at_tau_ours is not None
        if self.speedup is None and both:
            self.speedup = speedup_ratio(self.first_at_tau_base, self.first_at_tau_ours)
        if not both:
            self.speedup = None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _fmt_index(v, unit: str) -> str:
    if v is None:
        return "—"
    if unit == "step":
        return f"{int(v) // 1000}k" if v >= 1000 and v % 1000 == 0 else f"{v:g}"
    return f"{v:g} {unit}"


def table_row(r: RunReport) -> list[str]:
    return [
        r.dataset, r.student, r.teacher, r.optimizer, f"{r.teacher_metric:.4g}", f"{r.tau:.4g}",
        f"{_fmt_index(r.first_at_tau_base, r.unit)} → {_fmt_index(r.first_at_tau_ours, r.unit)}",
        "failed" if r.failed else format_speedup(r.first_at_tau_base, r.first_at_tau_ours),
        f"{r.best_metric_base:.4g} / {r.best_metric_ours:.4g}",
    ]


def render_table(reports: Sequence[RunReport]) -> str:
    rows = [TABLE_COLUMNS] + [table_row(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RunReport.columns(), lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                         for k, v in asdict(r).items()})
    return buf.getvalue()


def _parse_cell(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunReport)}
    t = str(types[name])
    if raw == "" and "None" in t:
        return None
    if t.startswith("float"):
        return float(raw)
    if t == "int":
        return int(raw)
    if t == "bool":
        return raw == "True"
    return raw


def reports_from_csv(text: str) -> list[RunReport]:
    reader = csv.DictReader(io.StringIO(text))
    return [RunReport(**{k: _parse_cell(k, v) for k, v in row.items()}) for row in reader]


def reports_to_json(reports: Sequence[RunReport]) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2, allow_nan=True)


def reports_from_json(text: str) -> list[RunReport]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("runs", [data])
    return [RunReport(**d) for d in data]


def write_log_csv(path, rows: Iterable[EvalLogRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EvalLogRow.columns())
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_dict())
    return path


def read_log_csv(path) -> list[EvalLogRow]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalLogRow(
                run_id=row["run_id"], index=float(row["index"]), metric=float(row["metric"]),
                lambda_eff=float(row["lambda_eff"]), gate_active=row["gate_active"] == "True",
                grad_norm_base=float(row["grad_norm_base"]),
                grad_norm_distill=float(row["grad_norm_distill"]), wall_time=float(row["wall_time"]),
                counter=int(row["counter"]), l_base=float(row["l_base"]),
                l_distill=float(row["l_distill"]), temperature=float(row["temperature"]),
                step=int(row["step"]), batch_fingerprint=row["batch_fingerprint"]))
    return out


def plot_curves(path, curves: dict[str, Sequence[EvalLogRow]], tau: float | None = None,
                gate_off: float | None = None, ylabel: str = "validation metric",
                xlabel: str = "epoch") -> Path:
    """Metric-vs-index curves per arm with the target line and gate-off marker."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    colors = {"base": "tab:blue", "ours": "tab:red"}
    for name, rows in curves.items():
        ax.plot([r.index for r in rows], [r.metric for r in rows], label=name,
                color=colors.get(name.split("-")[0]))
    if tau is not None and math.isfinite(tau):
        ax.axhline(tau, color="gray", ls="--", lw=1, label=f"τ = {tau:.3g}")
    if gate_off is not None:
        ax.axvline(gate_off, color="tab:red", ls=":", lw=1, label="gate off")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_band(path, gaps: Sequence[float], speedups: Sequence[float], labels: Sequence[str],
              band_edges=(-15.0, 0.0)) -> Path:
    """Speedup against relative teacher gap, with the suitable band shaded."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.axvspan(*band_edges, color="tab:green", alpha=0.15, label="suitably weaker")
    ax.axhline(1.0, color="gray", lw=1)
    ax.scatter(gaps, speedups, color="tab:red")
    for g, s, lab in zip(gaps, speedups, labels):
        ax.annotate(lab, (g, s), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("teacher − baseline student (relative %)")
    ax.set_ylabel("speedup (×)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def emit_report(reports: Sequence[RunReport], fmt: str, path=None) -> str:
    """Render ``reports`` as ``table``, ``csv`` or ``json``; optionally write to ``path``."""
    if not reports:
        raise ValueError("no reports to emit")
    renderers = {"table": render_table, "csv": reports_to_csv, "json": reports_to_json}
    if fmt not in renderers:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {sorted(renderers)} or svg")
    text = renderers[fmt](reports)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
