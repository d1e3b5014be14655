"""Growable ReLU multilayer perceptron with manual backpropagation.

Parameters live in ``GrowableMlp.layers`` as ``[weights, biases]`` pairs,
weights shaped (fan_out, fan_in), data column-batched (features, samples).
Hidden layers use the rectifier; the output layer emits raw logits.
Widths can grow in place via :func:`grow_layer` without changing the
network function.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import NumericError, orthonormal_columns

__all__ = [
    "GrowableMlp",
    "ActivationTrace",
    "GrowthInfeasibleError",
    "INIT_STRATEGIES",
    "init_mlp",
    "forward",
    "loss_and_grads",
    "train_step",
    "make_fanin",
    "grow_layer",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_STRATEGIES = ("qr", "random", "he", "xavier", "nullspace", "zero")

CHECKPOINT_VERSION = 1


class GrowthInfeasibleError(RuntimeError):
    """Requested growth cannot be performed (e.g. exhausted null space)."""


@dataclass
class GrowableMlp:
    input_dim: int
    output_dim: int
    # one [weights, biases] pair per layer; the last pair is the output layer
    layers: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_hidden(self) -> int:
        return len(self.layers) - 1

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[0] for w, _ in self.layers[:-1]]

    def fan_in(self, layer: int) -> int:
        return self.layers[layer][0].shape[1]

    def width(self, layer: int) -> int:
        return self.layers[layer][0].shape[0]

    def copy(self) -> "GrowableMlp":
        return GrowableMlp(
            self.input_dim,
            self.output_dim,
            [[w.copy(), b.copy()] for w, b in self.layers],
        )


@dataclass
class ActivationTrace:
    inputs: np.ndarray            # (input_dim, n)
    hidden: list[np.ndarray]      # post-rectifier H_l, each (M_l, n)
    logits: np.ndarray            # (output_dim, n)


def init_mlp(input_dim: int, hidden_widths, output_dim: int,
             rng: np.random.Generator, dtype=np.float64) -> GrowableMlp:
    """Build an MLP with weights uniform in +-1/sqrt(fan_in), zero biases."""
    widths = list(hidden_widths)
    if input_dim < 1 or output_dim < 1 or any(m < 1 for m in widths):
        raise ValueError(
            f"all dimensions must be >= 1, got in={input_dim} "
            f"hidden={widths} out={output_dim}")
    dims = [input_dim] + widths + [output_dim]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        layers.append([w, np.zeros(fan_out, dtype=dtype)])
    return GrowableMlp(input_dim, output_dim, layers)


def forward(mlp: GrowableMlp, x: np.ndarray) -> ActivationTrace:
    """Forward pass on a column batch x of shape (input_dim, n)."""
    x = np.asarray(x, dtype=mlp.layers[0][0].dtype)
    if x.ndim != 2 or x.shape[0] != mlp.input_dim:
        raise ValueError(
            f"expected input of shape ({mlp.input_dim}, n), got {x.shape}")
    hidden = []
    h = x
    for w, b in mlp.layers[:-1]:
        h = np.maximum(w @ h + b[:, None], 0.0)
        hidden.append(h)
    w, b = mlp.layers[-1]
    logits = w @ h + b[:, None]
    return ActivationTrace(inputs=x, hidden=hidden, logits=logits)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=0, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy of column-batched logits vs labels."""
    logp = _log_softmax(logits)
    return float(-np.mean(logp[y, np.arange(y.size)]))


def _backprop(mlp: GrowableMlp, trace: ActivationTrace,
              delta_logits: np.ndarray) -> list[list[np.ndarray]]:
    """Push a logits-gradient back through the trace; per-layer [dW, db]."""
    grads = [None] * mlp.n_layers
    delta = delta_logits
    for l in range(mlp.n_layers - 1, -1, -1):
        below = trace.hidden[l - 1] if l > 0 else trace.inputs
        grads[l] = [delta @ below.T, delta.sum(axis=1)]
        if l > 0:
            delta = (mlp.layers[l][0].T @ delta) * (trace.hidden[l - 1] > 0)
    return grads


def loss_and_grads(mlp: GrowableMlp, x: np.ndarray, y: np.ndarray,
                   state=None, lam: float = 0.0):
    """Total loss (cross-entropy plus anchored quadratic penalty) and its
    gradients, unclipped. ``state`` is a ConsolidationState or None."""
    trace = forward(mlp, x)
    n = y.size
    probs = np.exp(_log_softmax(trace.logits))
    loss = cross_entropy(trace.logits, y)
    delta = probs
    delta[y, np.arange(n)] -= 1.0
    delta /= n
    grads = _backprop(mlp, trace, delta)
    if state is not None and lam != 0.0:
        pen_value, pen_grads = state.penalty_and_grad(mlp, lam)
        loss += pen_value
        for g, pg in zip(grads, pen_grads):
            g[0] += pg[0]
            g[1] += pg[1]
    return loss, grads


def train_step(mlp: GrowableMlp, x: np.ndarray, y: np.ndarray, state,
               lam: float, lr: float, clip: float) -> float:
    """One SGD step on CE + consolidation penalty with global-norm gradient
    clipping. Returns the pre-step total loss."""
    loss, grads = loss_and_grads(mlp, x, y, state, lam)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite training loss {loss}")
    sq = 0.0
    for gw, gb in grads:
        sq += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
    gnorm = np.sqrt(sq)
    scale = lr if gnorm <= clip else lr * clip / gnorm
    for (w, b), (gw, gb) in zip(mlp.layers, grads):
        w -= scale * gw
        b -= scale * gb
    return loss


def make_fanin(init_variant: str, dim_in: int, k: int, s_init: float,
               existing_weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fan-in block (k, dim_in) for k new neurons, per the named variant."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if init_variant == "qr":
        return s_init * orthonormal_columns(dim_in, k, rng).T
    if init_variant == "random":
        return rng.standard_normal((k, dim_in))
    if init_variant == "he":
        return rng.standard_normal((k, dim_in)) * np.sqrt(2.0 / dim_in)
    if init_variant == "xavier":
        fan_out = existing_weights.shape[0]
        return rng.standard_normal((k, dim_in)) * np.sqrt(2.0 / (dim_in + fan_out))
    if init_variant == "nullspace":
        svals = np.linalg.svd(existing_weights, compute_uv=False)
        tol = max(existing_weights.shape) * np.finfo(np.float64).eps * (
            svals[0] if svals.size else 0.0)
        rank = int(np.sum(svals > tol))
        free = dim_in - rank
        if free < k:
            raise GrowthInfeasibleError(
                f"null space has dimension {free}, cannot host {k} new rows")
        _, _, vt = np.linalg.svd(existing_weights)
        null_basis = vt[rank:].T  # (dim_in, free), orthonormal columns
        return (null_basis @ orthonormal_columns(free, k, rng)).T
    if init_variant == "zero":
        return np.zeros((k, dim_in))
    raise ValueError(f"unknown init variant {init_variant!r}")


def grow_layer(mlp: GrowableMlp, layer: int, k: int, strategy: str = "qr",
               s_init: float = 0.2, rng: np.random.Generator | None = None,
               max_width: int | None = None) -> bool:
    """Append k neurons to a hidden layer, preserving the network function.

    New fan-in rows come from :func:`make_fanin`; new biases and the new
    fan-out columns into the next layer are zero, so logits are unchanged
    for every input. Returns False (no mutation) when a max_width cap
    would be exceeded.
    """
    if not 0 <= layer < mlp.n_hidden:
        raise ValueError(f"layer {layer} is not a hidden layer")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if max_width is not None and mlp.width(layer) + k > max_width:
        return False
    if rng is None:
        rng = np.random.default_rng()
    w, b = mlp.layers[layer]
    new_rows = make_fanin(strategy, w.shape[1], k, s_init, w, rng)
    mlp.layers[layer][0] = np.vstack([w, new_rows.astype(w.dtype)])
    mlp.layers[layer][1] = np.concatenate([b, np.zeros(k, dtype=b.dtype)])
    w_next = mlp.layers[layer + 1][0]
    mlp.layers[layer + 1][0] = np.hstack(
        [w_next, np.zeros((w_next.shape[0], k), dtype=w_next.dtype)])
    return True


def param_count(mlp: GrowableMlp) -> int:
    return sum(w.size + b.size for w, b in mlp.layers)


def save_checkpoint(mlp: GrowableMlp, path) -> None:
    """Dump layer shapes and parameters to a versioned .npz file."""
    arrays = {
        "version": np.array(CHECKPOINT_VERSION),
        "input_dim": np.array(mlp.input_dim),
        "output_dim": np.array(mlp.output_dim),
        "n_layers": np.array(mlp.n_layers),
    }
    for i, (w, b) in enumerate(mlp.layers):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(path, **arrays)


def load_checkpoint(path) -> GrowableMlp:
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        n_layers = int(data["n_layers"])
        layers = [[data[f"w{i}"].copy(), data[f"b{i}"].copy()]
                  for i in range(n_layers)]
        return GrowableMlp(int(data["input_dim"]), int(data["output_dim"]), layers)
