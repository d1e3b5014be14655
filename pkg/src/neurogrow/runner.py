"""Experiment orchestration: config parsing, the per-task training loop
with growth and consolidation, and seed fan-out.

The loop per task: train each epoch over a seeded shuffle, then (outside
the cooldown window) measure per-layer effective dimension on the task's
probe batch and the current-task Fisher on the first five minibatches of
that epoch's shuffle, evaluate the growth trigger, and apply any growth
with zero-padded consolidation state. After the task: consolidate the
Fisher average, re-anchor, update thresholds, and reset the reference
effective dimensions on the post-task probe. Task 0 runs with its own
learning rate and epoch count and carries no penalty (the accumulated
Fisher is still zero).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import consolidation as cons
from . import datasets, diagnostics, network, trigger
from .linalg import NumericError, percentile

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "config_from_dict",
    "run_experiment",
    "run_single_seed",
]

log = logging.getLogger("neurogrow")

MODES = ("noracl", "static_ewc")

BENCHMARK_DEFAULTS = {
    "permuted": {"n_tasks": 10, "lam": 500.0},
    "rotated": {"n_tasks": 5, "lam": 2000.0},
    "binary_split": {"n_tasks": 5, "lam": 5000.0},
}

# rng stream tags: every generator derives from (seed, tag, ...)
_STREAM_INIT = 0
_STREAM_GROWTH = 1
_STREAM_PROBE = 2
_STREAM_BATCHES = 3


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    benchmark: str = "permuted"
    n_tasks: int = 10
    mode: str = "noracl"
    hidden_widths: list = field(default_factory=lambda: [32, 32])
    lam: float = 500.0
    alpha: float = 0.9
    lr_first: float = 1e-1
    lr_later: float = 5e-3
    epochs_first: int = 10
    epochs_later: int = 30
    batch_size: int = 256
    clip: float = 5.0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    gamma: float = 0.9
    eps: float = 0.05
    p: float = 25.0
    cooldown: int = 3
    s_init: float = 0.2
    init_variant: str = "qr"
    max_width: int | None = None
    fixed_k: int = 6
    scheduled_tasks: list = field(default_factory=lambda: [0, 5, 15, 25])
    scheduled_k: int = 32
    plateau_window: int = 3
    plateau_tol: float = 0.002
    probe_size: int = 256
    fisher_batches: int = 5
    eval_every: int = 1
    dtype: str = "float64"
    jobs: int = 1
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.benchmark not in BENCHMARK_DEFAULTS:
            raise ConfigError(f"benchmark: unknown value {self.benchmark!r}")
        if self.trigger_variant() is None:
            raise ConfigError(f"mode: unknown value {self.mode!r}")
        if self.n_tasks < 1:
            raise ConfigError(f"n_tasks: must be >= 1, got {self.n_tasks}")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigError(f"hidden_widths: invalid {self.hidden_widths}")
        for key in ("lr_first", "lr_later", "clip"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key}: must be > 0")
        for key in ("epochs_first", "epochs_later", "batch_size",
                    "probe_size", "fisher_batches", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if self.lam < 0:
            raise ConfigError(f"lam: must be >= 0, got {self.lam}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha: must be in (0, 1), got {self.alpha}")
        if not self.seeds:
            raise ConfigError("seeds: need at least one")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype: must be float64 or float32, got "
                              f"{self.dtype!r}")
        if self.jobs < 1:
            raise ConfigError(f"jobs: must be >= 1, got {self.jobs}")
        try:
            self.growth_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def trigger_variant(self) -> str | None:
        """Growth variant implied by the mode, or None if the mode is bad.
        static_ewc maps to no growth at all."""
        if self.mode in MODES:
            return "full" if self.mode == "noracl" else "none"
        if self.mode.startswith("ablation:"):
            variant = self.mode.split(":", 1)[1]
            if variant in trigger.TRIGGER_VARIANTS and variant != "full":
                return variant
        return None

    def growth_config(self) -> trigger.GrowthConfig:
        variant = self.trigger_variant()
        return trigger.GrowthConfig(
            gamma=self.gamma, eps=self.eps, p=self.p, cooldown=self.cooldown,
            s_init=self.s_init,
            trigger_variant="full" if variant == "none" else variant,
            init_variant=self.init_variant, max_width=self.max_width,
            fixed_k=self.fixed_k,
            scheduled_tasks=frozenset(self.scheduled_tasks),
            scheduled_k=self.scheduled_k,
            plateau_window=self.plateau_window, plateau_tol=self.plateau_tol)

    def config_hash(self) -> str:
        skip = {"data_dir", "out_dir"}
        items = []
        for f in fields(self):
            if f.name in skip:
                continue
            value = getattr(self, f.name)
            if isinstance(value, (list, tuple)):
                value = list(value)
            items.append(f"{f.name}={value!r}")
        digest = hashlib.sha256(";".join(items).encode()).hexdigest()
        return digest[:16]


_LIST_INT_KEYS = {"hidden_widths", "seeds", "scheduled_tasks"}
_INT_KEYS = {"n_tasks", "epochs_first", "epochs_later", "batch_size",
             "cooldown", "fixed_k", "scheduled_k", "plateau_window",
             "probe_size", "fisher_batches", "eval_every", "max_width",
             "jobs"}
_FLOAT_KEYS = {"lam", "alpha", "lr_first", "lr_later", "clip", "gamma",
               "eps", "p", "s_init", "plateau_tol"}
_STR_KEYS = {"benchmark", "mode", "init_variant", "dtype", "data_dir",
             "out_dir"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _LIST_INT_KEYS:
            if raw in ("", "[]", "none"):
                return []
            return [int(v) for v in raw.strip("[]").replace(",", " ").split()]
        if key in _INT_KEYS:
            if key == "max_width" and raw.lower() in ("none", ""):
                return None
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _STR_KEYS:
            return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def config_from_dict(pairs: dict) -> ExperimentConfig:
    """Build a config from string-keyed overrides, applying the benchmark's
    default task count and penalty weight unless explicitly set."""
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(pairs) - known
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    benchmark = pairs.get("benchmark", "permuted")
    if benchmark not in BENCHMARK_DEFAULTS:
        raise ConfigError(f"benchmark: unknown value {benchmark!r}")
    merged = dict(BENCHMARK_DEFAULTS[benchmark])
    merged.update(pairs)
    return ExperimentConfig(**merged)


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat `key = value` file ('#' comments) into a config.

    Values given in `overrides` (already-typed or raw strings) win over
    the file; benchmark defaults fill whatever remains.
    """
    pairs = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            key = key.strip()
            pairs[key] = _parse_value(key, raw)
    if overrides:
        for key, value in overrides.items():
            pairs[key] = _parse_value(key, value) if isinstance(value, str) else value
    return config_from_dict(pairs)


def _load_stream(cfg: ExperimentConfig) -> datasets.TaskStream:
    if cfg.data_dir is None:
        raise ConfigError("data_dir: required to load the dataset")
    train, test = datasets.load_mnist_dir(cfg.data_dir)
    return datasets.build_stream(cfg.benchmark, cfg.n_tasks, seed=cfg.seeds[0],
                                 train=train, test=test)


def _hidden_fisher_values(fisher) -> list[np.ndarray]:
    return [cons.layer_values(fisher, l) for l in range(len(fisher) - 1)]


def _first_batches(task, cfg, seed_seq, limit):
    out = []
    for x, y in datasets.batches(task, cfg.batch_size, seed_seq):
        out.append((x, y))
        if len(out) >= limit:
            break
    return out


def run_single_seed(cfg: ExperimentConfig, stream: datasets.TaskStream,
                    seed: int):
    """One full continual-learning run. Returns (records, events, summary)."""
    t_start = time.perf_counter()
    gcfg = cfg.growth_config()
    variant = cfg.trigger_variant()
    grows = variant != "none"
    epoch_signal_variants = ("full", "ed_only", "fsat_only", "loss_plateau")
    task_start_variants = ("fixed_per_task", "scheduled")

    dtype = np.dtype(cfg.dtype)
    input_dim = stream.tasks[0].train_x.shape[0]
    mlp = network.init_mlp(
        input_dim, cfg.hidden_widths, stream.label_space_size,
        np.random.default_rng(np.random.SeedSequence([seed, _STREAM_INIT])),
        dtype=dtype)
    state = cons.ConsolidationState.zeros(mlp, cfg.alpha)
    growth_rng = np.random.default_rng(
        np.random.SeedSequence([seed, _STREAM_GROWTH]))
    refs = trigger.GrowthRefs()
    records: list[diagnostics.MetricsRecord] = []
    events: list[diagnostics.GrowthEvent] = []

    def apply_growth(decisions, task_idx, epoch, signals=None):
        grew_any = False
        for layer, k in decisions:
            params_before = network.param_count(mlp)
            if not network.grow_layer(mlp, layer, k, gcfg.init_variant,
                                      gcfg.s_init, growth_rng,
                                      gcfg.max_width):
                log.warning("seed %d task %d epoch %d: growth of %d at layer"
                            " %d refused by max_width=%s", seed, task_idx,
                            epoch, k, layer, gcfg.max_width)
                continue
            cons.pad_for_growth(state, layer, k)
            sig = signals.get(layer, {}) if signals else {}
            events.append(diagnostics.GrowthEvent(
                task=task_idx, epoch=epoch, layer=layer, k=k,
                width_after=mlp.width(layer),
                params_added=network.param_count(mlp) - params_before,
                params_after=network.param_count(mlp), **sig))
            grew_any = True
        return grew_any

    try:
        for task_idx, task in enumerate(stream.tasks):
            lr = cfg.lr_first if task_idx == 0 else cfg.lr_later
            n_epochs = cfg.epochs_first if task_idx == 0 else cfg.epochs_later
            task.materialize_train(dtype=dtype)
            probe_rng = np.random.default_rng(
                np.random.SeedSequence([seed, _STREAM_PROBE, task_idx]))
            probe_sel = probe_rng.choice(
                task.n_train, size=min(cfg.probe_size, task.n_train),
                replace=False)
            probe_x, _ = task.train_cols(probe_sel)

            if task_idx == 0 and grows:
                # reference for task 0: the untrained network's probe
                trigger.post_task_reset(refs, network.forward(mlp, probe_x), gcfg)

            if grows and variant in task_start_variants:
                ctx = trigger.EpochContext(
                    task_idx=task_idx, at_task_start=True,
                    widths=mlp.hidden_widths)
                apply_growth(trigger.ablation_trigger(gcfg, ctx, refs, state.tau),
                             task_idx, epoch=0)

            val_hist: list[float] = []
            for epoch in range(1, n_epochs + 1):
                batch_seq = np.random.SeedSequence(
                    [seed, _STREAM_BATCHES, task_idx, epoch])
                loss_sum = 0.0
                n_batches = 0
                for x, yb in datasets.batches(task, cfg.batch_size, batch_seq):
                    loss_sum += network.train_step(
                        mlp, x, yb, state, cfg.lam, lr, cfg.clip)
                    n_batches += 1

                # growth evaluation at epoch end, outside the cooldown window
                if grows and variant in epoch_signal_variants:
                    if refs.cooldown_remaining > 0:
                        refs.cooldown_remaining -= 1
                    else:
                        decisions, signals = _epoch_growth_decision(
                            cfg, gcfg, variant, mlp, state, task, task_idx,
                            refs, probe_x, batch_seq, val_hist)
                        if apply_growth(decisions, task_idx, epoch, signals):
                            refs.cooldown_remaining = gcfg.cooldown

                # end-of-epoch metrics reflect the post-growth state
                probe_trace = network.forward(mlp, probe_x)
                phis = [trigger.compute_ed(h, gcfg.eps)
                        for h in probe_trace.hidden]
                eval_due = (epoch % cfg.eval_every == 0) or epoch == n_epochs
                if eval_due:
                    accs = diagnostics.per_task_accuracies(
                        mlp, stream.tasks[:task_idx + 1])
                    avg = float(np.mean(accs))
                elif variant == "loss_plateau":
                    accs = [float("nan")] * task_idx + [diagnostics.accuracy(
                        mlp, *stream.tasks[task_idx].test_xy())]
                    avg = float("nan")
                else:
                    accs, avg = [], float("nan")
                if accs:
                    val_hist.append(accs[task_idx])
                records.append(diagnostics.MetricsRecord(
                    task=task_idx, epoch=epoch,
                    train_loss=loss_sum / max(n_batches, 1),
                    per_task_acc=[] if not eval_due else list(accs),
                    avg_acc=avg, params=network.param_count(mlp),
                    widths=mlp.hidden_widths, phi=phis,
                    locked=[diagnostics.locked_fraction(state, cfg.lam, l)
                            for l in range(mlp.n_layers)],
                    n_eff_plastic=diagnostics.effective_plastic_count(
                        state, cfg.lam)))

            # post-task consolidation on the first batches in stored order
            fisher_t = cons.estimate_fisher_diag(
                mlp, _first_batches(task, cfg, None, cfg.fisher_batches))
            cons.consolidate_after_task(state, fisher_t, mlp)
            if grows:
                trigger.post_task_reset(
                    refs, network.forward(mlp, probe_x), gcfg)
            task.release_train()
    except NumericError as exc:
        summary = _seed_summary(cfg, stream, mlp, records, events, seed,
                                status=f"failed: {exc} (seed {seed})",
                                runtime=time.perf_counter() - t_start)
        return records, events, summary

    summary = _seed_summary(cfg, stream, mlp, records, events, seed,
                            status="ok",
                            runtime=time.perf_counter() - t_start)
    return records, events, summary


def _epoch_growth_decision(cfg, gcfg, variant, mlp, state, task, task_idx,
                           refs, probe_x, batch_seq, val_hist):
    """Signals and decisions for the per-epoch growth variants. Returns
    (decisions, per-layer signal dict for event logging)."""
    probe_trace = network.forward(mlp, probe_x)
    fisher_vals = None
    if variant in ("full", "fsat_only"):
        fisher_curr = cons.estimate_fisher_diag(
            mlp, _first_batches(task, cfg, batch_seq, cfg.fisher_batches))
        fisher_vals = _hidden_fisher_values(fisher_curr)

    if variant == "full":
        decisions = trigger.evaluate_growth(
            probe_trace, fisher_vals, gcfg, refs, state.tau)
    else:
        ctx = trigger.EpochContext(
            task_idx=task_idx, at_task_start=False,
            widths=mlp.hidden_widths, trace=probe_trace,
            fisher_curr=fisher_vals, val_acc_history=list(val_hist))
        decisions = trigger.ablation_trigger(gcfg, ctx, refs, state.tau)

    signals = {}
    for layer, _ in decisions:
        signals[layer] = {
            "phi": trigger.compute_ed(probe_trace.hidden[layer], gcfg.eps),
            "phi_ref": (gcfg.gamma * refs.phi0[layer]
                        if refs.phi0 is not None else None),
            "fisher_pct": (percentile(fisher_vals[layer], gcfg.p)
                           if fisher_vals is not None else None),
            "tau": state.tau[layer],
        }
    return decisions, signals


def _seed_summary(cfg, stream, mlp, records, events, seed, status, runtime):
    last_eval = next((r for r in reversed(records) if r.per_task_acc), None)
    added = [0] * mlp.n_hidden
    for e in events:
        added[e.layer] += e.k
    return {
        "seed": int(seed),
        "status": status,
        "benchmark": cfg.benchmark,
        "mode": cfg.mode,
        "n_tasks": len(stream.tasks),
        "n_hidden": mlp.n_hidden,
        "config_hash": cfg.config_hash(),
        "final_avg_accuracy": (last_eval.avg_acc if last_eval else None),
        "final_per_task_accuracy": (last_eval.per_task_acc if last_eval else None),
        "final_params": network.param_count(mlp),
        "final_widths": mlp.hidden_widths,
        "neurons_added_per_layer": added,
        "n_growth_events": len(events),
        "runtime_sec": round(runtime, 2),
    }


def _run_and_emit(cfg: ExperimentConfig, stream, seed: int) -> dict:
    records, events, summary = run_single_seed(cfg, stream, seed)
    if cfg.out_dir is not None:
        diagnostics.emit_records(records, events, summary,
                                 Path(cfg.out_dir) / f"seed_{seed}")
    log.info("seed %d: %s acc=%s params=%s widths=%s (%.1fs)",
             seed, summary["status"], summary["final_avg_accuracy"],
             summary["final_params"], summary["final_widths"],
             summary["runtime_sec"])
    return summary


# handed to forked seed workers through process inheritance; pickling the
# stream per submission would copy the whole dataset
_WORKER_ARGS: dict = {}


def _run_seed_worker(seed: int) -> dict:
    return _run_and_emit(_WORKER_ARGS["cfg"], _WORKER_ARGS["stream"], seed)


def run_experiment(cfg: ExperimentConfig,
                   stream: datasets.TaskStream | None = None) -> dict:
    """Run every seed in the config (in forked worker processes when
    jobs > 1); emit per-seed outputs when out_dir is set; return an
    aggregate summary."""
    if stream is None:
        stream = _load_stream(cfg)
    if cfg.jobs > 1 and len(cfg.seeds) > 1:
        import multiprocessing as mp
        _WORKER_ARGS["cfg"] = cfg
        _WORKER_ARGS["stream"] = stream
        try:
            with mp.get_context("fork").Pool(processes=cfg.jobs) as pool:
                per_seed = pool.map(_run_seed_worker, cfg.seeds)
        finally:
            _WORKER_ARGS.clear()
    else:
        per_seed = [_run_and_emit(cfg, stream, seed) for seed in cfg.seeds]
    ok = [s for s in per_seed if s["status"] == "ok"]
    accs = [s["final_avg_accuracy"] for s in ok
            if s["final_avg_accuracy"] is not None]
    aggregate = {
        "benchmark": cfg.benchmark,
        "mode": cfg.mode,
        "config_hash": cfg.config_hash(),
        "n_seeds": len(cfg.seeds),
        "n_failed": len(per_seed) - len(ok),
        "mean_final_accuracy": float(np.mean(accs)) if accs else None,
        "std_final_accuracy": float(np.std(accs)) if accs else None,
        "mean_final_params": (float(np.mean([s["final_params"] for s in ok]))
                              if ok else None),
        "per_seed": per_seed,
    }
    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "aggregate.json", "w") as f:
            json.dump(aggregate, f, indent=2, sort_keys=True)
            f.write("\n")
    return aggregate
