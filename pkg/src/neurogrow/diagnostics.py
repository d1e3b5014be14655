"""Evaluation and plasticity diagnostics, plus structured metric output.

Plasticity metrics derive from the per-parameter effective learning rate
under the quadratic penalty: eta_eff/eta = 1 / (1 + lam * F_i). A fully
unconstrained parameter contributes 1 to the effective plastic count, a
frozen one contributes 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consolidation import ConsolidationState, layer_values
from .network import GrowableMlp, forward, param_count

__all__ = [
    "MetricsRecord",
    "GrowthEvent",
    "SCHEMA_VERSION",
    "accuracy",
    "per_task_accuracies",
    "average_accuracy",
    "locked_fraction",
    "effective_plastic_count",
    "emit_records",
]

SCHEMA_VERSION = 1

_EVAL_CHUNK = 8192


@dataclass
class GrowthEvent:
    task: int
    epoch: int
    layer: int
    k: int
    width_after: int
    params_added: int
    params_after: int
    # signal values at decision time; None for schedule-driven growth
    phi: float | None = None
    phi_ref: float | None = None
    fisher_pct: float | None = None
    tau: float | None = None


@dataclass
class MetricsRecord:
    task: int
    epoch: int
    train_loss: float
    per_task_acc: list
    avg_acc: float
    params: int
    widths: list
    phi: list           # per hidden layer effective dimension
    locked: list        # per layer locked fraction
    n_eff_plastic: float
    events: list = field(default_factory=list)  # GrowthEvents this epoch


def _test_split(item):
    if hasattr(item, "test_xy"):
        return item.test_xy()
    return item


def accuracy(mlp: GrowableMlp, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax-correct predictions, evaluated in chunks."""
    correct = 0
    for start in range(0, y.size, _EVAL_CHUNK):
        sel = slice(start, start + _EVAL_CHUNK)
        logits = forward(mlp, x[:, sel]).logits
        correct += int(np.sum(np.argmax(logits, axis=0) == y[sel]))
    return correct / y.size


def per_task_accuracies(mlp: GrowableMlp, tasks_seen) -> list[float]:
    return [accuracy(mlp, *_test_split(t)) for t in tasks_seen]


def average_accuracy(mlp: GrowableMlp, tasks_seen) -> float:
    """Unweighted mean test accuracy over all tasks seen so far."""
    accs = per_task_accuracies(mlp, tasks_seen)
    if not accs:
        raise ValueError("no tasks seen")
    return float(np.mean(accs))


def locked_fraction(state: ConsolidationState, lam: float, layer: int,
                    threshold: float = 0.1) -> float:
    """Fraction of the layer's parameters whose effective learning rate
    fell below `threshold` of the base rate: 1/(1 + lam*F) < threshold."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if lam == 0:
        return 0.0
    values = layer_values(state.fisher, layer)
    return float(np.mean(1.0 / (1.0 + lam * values) < threshold))


def effective_plastic_count(state: ConsolidationState, lam: float) -> float:
    """Sum over all parameters of 1 / (1 + lam * F_i)."""
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    total = 0.0
    for fw, fb in state.fisher:
        total += float(np.sum(1.0 / (1.0 + lam * fw)))
        total += float(np.sum(1.0 / (1.0 + lam * fb)))
    return total


def _metrics_header(n_tasks: int, n_hidden: int, n_layers: int) -> list[str]:
    cols = ["task", "epoch", "train_loss", "avg_acc", "params", "n_eff_plastic"]
    cols += [f"width_l{i + 1}" for i in range(n_hidden)]
    cols += [f"phi_l{i + 1}" for i in range(n_hidden)]
    cols += [f"locked_l{i + 1}" for i in range(n_layers)]
    cols += [f"acc_task_{t}" for t in range(n_tasks)]
    return cols


def emit_records(records: list[MetricsRecord], events: list[GrowthEvent],
                 summary: dict, out_dir) -> dict:
    """Write metrics.csv, growth_events.csv and summary.json into out_dir.

    Column order is fixed by the header builders above; accuracy cells for
    tasks not yet seen stay empty. Returns the paths written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_tasks = int(summary["n_tasks"])
    n_hidden = len(records[-1].widths) if records else int(summary.get("n_hidden", 0))
    n_layers = n_hidden + 1

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_metrics_header(n_tasks, n_hidden, n_layers))
        for r in records:
            row = [r.task, r.epoch, f"{r.train_loss:.6f}", f"{r.avg_acc:.6f}",
                   r.params, f"{r.n_eff_plastic:.4f}"]
            row += [str(w) for w in r.widths]
            row += [f"{p:.6f}" for p in r.phi]
            row += [f"{v:.6f}" for v in r.locked]
            accs = [f"{a:.6f}" for a in r.per_task_acc]
            row += accs + [""] * (n_tasks - len(accs))
            writer.writerow(row)

    events_path = out / "growth_events.csv"
    with open(events_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "epoch", "layer", "k", "width_after",
                         "params_added", "params_after",
                         "phi", "phi_ref", "fisher_pct", "tau"])
        for e in events:
            signals = ["" if v is None else f"{v:.6g}"
                       for v in (e.phi, e.phi_ref, e.fisher_pct, e.tau)]
            writer.writerow([e.task, e.epoch, e.layer, e.k, e.width_after,
                             e.params_added, e.params_after] + signals)

    summary = dict(summary)
    summary["schema_version"] = SCHEMA_VERSION
    summary_path = out / "summary.json"
    with open(summary_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"metrics": metrics_path, "events": events_path,
            "summary": summary_path}
