"""Continual learning with on-demand neuron growth.

A growable ReLU MLP trained with SGD under online quadratic
consolidation, where hidden layers gain neurons when their activation
effective dimension and their Fisher saturation both indicate the
existing capacity is exhausted. Includes the MNIST benchmark streams,
plasticity diagnostics, and a closed-form oracle for the
random-pattern-association analysis.
"""

from .consolidation import (
    ConsolidationState,
    consolidate_after_task,
    estimate_fisher_diag,
    pad_for_growth,
    penalty_and_grad,
)
from .datasets import TaskStream, batches, build_stream, load_idx, rotate_image
from .diagnostics import (
    GrowthEvent,
    MetricsRecord,
    average_accuracy,
    effective_plastic_count,
    emit_records,
    locked_fraction,
)
from .linalg import jacobi_eigh, orthonormal_columns, percentile, singular_values
from .network import (
    ActivationTrace,
    GrowableMlp,
    forward,
    grow_layer,
    init_mlp,
    make_fanin,
    param_count,
    train_step,
)
from .runner import ExperimentConfig, parse_config, run_experiment, run_single_seed
from .theory import simulate_growth_law, verify_theorems
from .trigger import (
    GrowthConfig,
    GrowthRefs,
    compute_ed,
    evaluate_growth,
    fisher_gate,
    post_task_reset,
)

__version__ = "0.1.0"
