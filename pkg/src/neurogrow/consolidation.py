"""Online consolidation state: accumulated Fisher diagonal, anchor
parameters, and per-layer saturation thresholds.

The accumulated Fisher blends across tasks with an exponential moving
average; the quadratic penalty anchors parameters at the snapshot taken
after the previous task. Entries created by growth stay exactly zero
until the next consolidation, so grown parameters are fully plastic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import NumericError
from .network import GrowableMlp, forward, _log_softmax

__all__ = [
    "ConsolidationState",
    "estimate_fisher_diag",
    "consolidate_after_task",
    "penalty_and_grad",
    "pad_for_growth",
    "layer_values",
]


@dataclass
class ConsolidationState:
    fisher: list[list[np.ndarray]]   # per layer [F_w, F_b], nonnegative
    anchors: list[list[np.ndarray]]  # per layer [theta*_w, theta*_b]
    tau: list[float]                 # per-layer saturation threshold
    alpha: float                     # EMA blend factor in (0, 1)

    @classmethod
    def zeros(cls, mlp: GrowableMlp, alpha: float) -> "ConsolidationState":
        """Fresh state before any consolidation: F=0, anchors at current
        parameters, tau=0 (the saturation gate is permissive on task 1)."""
        fisher = [[np.zeros_like(w), np.zeros_like(b)] for w, b in mlp.layers]
        anchors = [[w.copy(), b.copy()] for w, b in mlp.layers]
        return cls(fisher, anchors, [0.0] * mlp.n_layers, alpha)

    def penalty_and_grad(self, mlp: GrowableMlp, lam: float):
        return penalty_and_grad(mlp, self, lam)

    def copy(self) -> "ConsolidationState":
        return ConsolidationState(
            [[fw.copy(), fb.copy()] for fw, fb in self.fisher],
            [[aw.copy(), ab.copy()] for aw, ab in self.anchors],
            list(self.tau),
            self.alpha,
        )


def _check_congruent(state: ConsolidationState, mlp: GrowableMlp) -> None:
    if len(state.fisher) != mlp.n_layers:
        raise ValueError(
            f"state has {len(state.fisher)} layers, model has {mlp.n_layers}")
    for l, ((w, b), (fw, fb)) in enumerate(zip(mlp.layers, state.fisher)):
        if fw.shape != w.shape or fb.shape != b.shape:
            raise ValueError(
                f"layer {l} shape mismatch: model {w.shape}, state {fw.shape}")


def estimate_fisher_diag(mlp: GrowableMlp, batches) -> list[list[np.ndarray]]:
    """Empirical Fisher diagonal: per-parameter mean over samples of the
    squared gradient of the true-label log-likelihood.

    ``batches`` is an iterable of (x, y) column batches. Because each
    sample's gradient of a dense layer is the rank-one outer product of
    its backprop delta and its input activation, the sum of squared
    per-sample gradients is (delta**2) @ (activation**2).T, computed here
    without a per-sample loop.
    """
    sums = [[np.zeros_like(w), np.zeros_like(b)] for w, b in mlp.layers]
    total = 0
    for x, y in batches:
        trace = forward(mlp, x)
        n = y.size
        total += n
        probs = np.exp(_log_softmax(trace.logits))
        delta = probs
        delta[y, np.arange(n)] -= 1.0  # per-sample d(-log p_true)/d logits
        for l in range(mlp.n_layers - 1, -1, -1):
            below = trace.hidden[l - 1] if l > 0 else trace.inputs
            d2 = delta * delta
            sums[l][0] += d2 @ (below * below).T
            sums[l][1] += d2.sum(axis=1)
            if l > 0:
                delta = (mlp.layers[l][0].T @ delta) * (trace.hidden[l - 1] > 0)
    if total == 0:
        raise ValueError("no batches provided for Fisher estimation")
    out = [[fw / total, fb / total] for fw, fb in sums]
    for fw, fb in out:
        if not (np.all(np.isfinite(fw)) and np.all(np.isfinite(fb))):
            raise NumericError("non-finite Fisher estimate")
    return out


def consolidate_after_task(state: ConsolidationState,
                           fisher_t: list[list[np.ndarray]],
                           mlp: GrowableMlp) -> ConsolidationState:
    """End-of-task update: blend the task Fisher into the running average,
    re-anchor at the current parameters, and update per-layer thresholds
    from the blended per-layer Fisher means. Mutates and returns state."""
    _check_congruent(state, mlp)
    for l, (ft_w, ft_b) in enumerate(fisher_t):
        fw, fb = state.fisher[l]
        if ft_w.shape != fw.shape or ft_b.shape != fb.shape:
            raise ValueError(f"task Fisher shape mismatch at layer {l}")
        state.fisher[l][0] = state.alpha * fw + (1.0 - state.alpha) * ft_w
        state.fisher[l][1] = state.alpha * fb + (1.0 - state.alpha) * ft_b
    state.anchors = [[w.copy(), b.copy()] for w, b in mlp.layers]
    for l in range(mlp.n_layers):
        layer_mean = float(np.mean(layer_values(state.fisher, l)))
        state.tau[l] = state.alpha * state.tau[l] + (1.0 - state.alpha) * layer_mean
    return state


def penalty_and_grad(mlp: GrowableMlp, state: ConsolidationState, lam: float):
    """Quadratic penalty (lam/2) * sum_i F_i (theta_i - theta*_i)^2 and its
    gradient lam * F_i (theta_i - theta*_i), in model shape."""
    _check_congruent(state, mlp)
    value = 0.0
    grads = []
    for (w, b), (fw, fb), (aw, ab) in zip(mlp.layers, state.fisher, state.anchors):
        dw = w - aw
        db = b - ab
        value += 0.5 * lam * (float(np.sum(fw * dw * dw)) + float(np.sum(fb * db * db)))
        grads.append([lam * fw * dw, lam * fb * db])
    return value, grads


def pad_for_growth(state: ConsolidationState, layer: int, k: int) -> ConsolidationState:
    """Zero-pad Fisher and anchors to match a just-grown model: k new
    fan-in rows and biases at ``layer``, k new fan-out columns at
    ``layer + 1``. Thresholds are unchanged. Mutates and returns state."""
    if not 0 <= layer < len(state.fisher) - 1:
        raise ValueError(f"layer {layer} is not a hidden layer")
    for store in (state.fisher, state.anchors):
        w, b = store[layer]
        store[layer][0] = np.vstack([w, np.zeros((k, w.shape[1]), dtype=w.dtype)])
        store[layer][1] = np.concatenate([b, np.zeros(k, dtype=b.dtype)])
        w_next = store[layer + 1][0]
        store[layer + 1][0] = np.hstack(
            [w_next, np.zeros((w_next.shape[0], k), dtype=w_next.dtype)])
    return state


def layer_values(per_layer: list[list[np.ndarray]], layer: int) -> np.ndarray:
    """Flatten one layer's weight and bias entries into a single vector."""
    w, b = per_layer[layer]
    return np.concatenate([w.ravel(), b.ravel()])
