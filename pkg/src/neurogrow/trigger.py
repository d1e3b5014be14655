"""Growth policy: when, where, and how much to grow.

The full trigger fires for a hidden layer when its effective dimension
exceeds a discounted reference (representational saturation) and the
current-task Fisher percentile exceeds the layer threshold (plasticity
saturation). Ablation variants force one conjunct or replace the signal
with task-start schedules or a validation plateau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import percentile, singular_values
from .network import ActivationTrace, make_fanin  # noqa: F401  (make_fanin is part of this module's surface)

__all__ = [
    "TRIGGER_VARIANTS",
    "GrowthConfig",
    "GrowthRefs",
    "EpochContext",
    "compute_ed",
    "fisher_gate",
    "evaluate_growth",
    "post_task_reset",
    "ablation_trigger",
    "make_fanin",
]

TRIGGER_VARIANTS = (
    "full", "ed_only", "fsat_only", "fixed_per_task", "scheduled", "loss_plateau",
)


@dataclass
class GrowthConfig:
    gamma: float = 0.9          # ED sensitivity discount
    eps: float = 0.05           # singular-value threshold
    p: float = 25.0             # Fisher percentile
    cooldown: int = 3           # epochs between growth evaluations
    s_init: float = 0.2         # fan-in scale for new neurons
    trigger_variant: str = "full"
    init_variant: str = "qr"
    max_width: int | None = None
    fixed_k: int = 6            # per-layer growth for fixed_per_task
    scheduled_tasks: frozenset = frozenset({0, 5, 15, 25})
    scheduled_k: int = 32       # per-layer growth for scheduled
    plateau_window: int = 3     # epochs for the loss_plateau variant
    plateau_tol: float = 0.002  # minimum accuracy improvement over the window

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not 0.0 <= self.p <= 100.0:
            raise ValueError(f"p must be in [0, 100], got {self.p}")
        if self.cooldown < 0:
            raise ValueError(f"cooldown must be >= 0, got {self.cooldown}")
        if self.s_init <= 0.0:
            raise ValueError(f"s_init must be > 0, got {self.s_init}")
        if self.trigger_variant not in TRIGGER_VARIANTS:
            raise ValueError(f"unknown trigger variant {self.trigger_variant!r}")
        self.scheduled_tasks = frozenset(self.scheduled_tasks)


@dataclass
class GrowthRefs:
    phi0: list | None = None        # per hidden layer reference ED
    cooldown_remaining: int = 0


@dataclass
class EpochContext:
    """Snapshot handed to the growth decision at the end of an epoch (or
    at a task start for schedule-style variants)."""
    task_idx: int
    at_task_start: bool
    widths: list
    trace: ActivationTrace | None = None
    fisher_curr: list | None = None           # per hidden layer value vectors
    val_acc_history: list = field(default_factory=list)  # current task only


def compute_ed(h: np.ndarray, eps: float) -> float:
    """Fraction of the layer's singular values of (1/sqrt(n)) H above eps."""
    m = h.shape[0]
    svals = singular_values(h)
    return float(np.sum(svals > eps)) / m


def fisher_gate(fisher_values, p: float, tau: float) -> bool:
    """True iff the nearest-rank p-percentile of the layer's current-task
    Fisher values strictly exceeds the layer threshold."""
    return percentile(fisher_values, p) > tau


def _floor_size(x: float) -> int:
    # nudge past float-representation error so e.g. 20 * (1 - 0.9) floors to 2
    return int(np.floor(x + 1e-9))


def _k_for_margin(m: int, phi: float, discounted_ref: float) -> int:
    """Growth size floor(M * (phi - gamma*phi0)), rounded up to 1 while the
    raw margin is positive but below one."""
    raw = m * (phi - discounted_ref)
    if raw <= 0.0:
        return 0
    return max(1, _floor_size(raw))


def _require_refs(refs: GrowthRefs, n_hidden: int) -> None:
    if refs.phi0 is None or len(refs.phi0) != n_hidden:
        raise ValueError("growth references unset; measure reference ED first")


def evaluate_growth(trace: ActivationTrace, fisher_curr, cfg: GrowthConfig,
                    refs: GrowthRefs, taus) -> list[tuple[int, int]]:
    """Full trigger: per hidden layer, fire when the ED condition and the
    Fisher gate both hold; size the growth by the ED margin."""
    n_hidden = len(trace.hidden)
    _require_refs(refs, n_hidden)
    decisions = []
    for l, h in enumerate(trace.hidden):
        phi = compute_ed(h, cfg.eps)
        ref = cfg.gamma * refs.phi0[l]
        if phi <= ref:
            continue
        if not fisher_gate(fisher_curr[l], cfg.p, taus[l]):
            continue
        k = _k_for_margin(h.shape[0], phi, ref)
        if k > 0:
            decisions.append((l, k))
    return decisions


def post_task_reset(refs: GrowthRefs, end_trace: ActivationTrace,
                    cfg: GrowthConfig) -> GrowthRefs:
    """Reset each hidden layer's reference ED to its value on the post-task
    probe batch and clear the cooldown. Mutates and returns refs."""
    refs.phi0 = [compute_ed(h, cfg.eps) for h in end_trace.hidden]
    refs.cooldown_remaining = 0
    return refs


def ablation_trigger(cfg: GrowthConfig, ctx: EpochContext, refs: GrowthRefs,
                     taus) -> list[tuple[int, int]]:
    """Growth decisions for the non-full trigger variants."""
    variant = cfg.trigger_variant
    if variant == "full":
        raise ValueError("ablation_trigger does not handle the full variant")
    n_hidden = len(ctx.widths)

    if variant == "ed_only":
        if ctx.at_task_start or ctx.trace is None:
            return []
        _require_refs(refs, n_hidden)
        decisions = []
        for l, h in enumerate(ctx.trace.hidden):
            k = _k_for_margin(h.shape[0], compute_ed(h, cfg.eps),
                              cfg.gamma * refs.phi0[l])
            if k > 0:
                decisions.append((l, k))
        return decisions

    if variant == "fsat_only":
        if ctx.at_task_start or ctx.fisher_curr is None:
            return []
        return [
            (l, max(1, _floor_size(ctx.widths[l] * (1.0 - cfg.gamma))))
            for l in range(n_hidden)
            if fisher_gate(ctx.fisher_curr[l], cfg.p, taus[l])
        ]

    if variant == "fixed_per_task":
        if not ctx.at_task_start:
            return []
        return [(l, cfg.fixed_k) for l in range(n_hidden)]

    if variant == "scheduled":
        if not ctx.at_task_start or ctx.task_idx not in cfg.scheduled_tasks:
            return []
        return [(l, cfg.scheduled_k) for l in range(n_hidden)]

    if variant == "loss_plateau":
        hist = ctx.val_acc_history
        if ctx.at_task_start or len(hist) < cfg.plateau_window + 1:
            return []
        if hist[-1] - hist[-1 - cfg.plateau_window] >= cfg.plateau_tol:
            return []
        return [
            (l, max(1, _floor_size(ctx.widths[l] * (1.0 - cfg.gamma))))
            for l in range(n_hidden)
        ]

    raise ValueError(f"unknown trigger variant {variant!r}")
