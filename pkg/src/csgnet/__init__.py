"""csgnet: train CNNs whose last-layer filters specialize to single classes.

A learnable class-by-filter gate matrix multiplies the penultimate
activation maps during a periodically inserted gated forward path; an L1
budget on the gate drives each filter toward one (or few) classes.  The
package ships the training loop, specificity metrics (mutual-information
matrix / MIS), filter correlation and masking analyses, weakly supervised
localization (GradMap / ActivMap / CAM), adversarial attacks plus a
feature-based detector, and a CLI covering each experiment family.
"""

__version__ = "0.1.0"

from .gates import (
    DegenerateColumnError,
    GateMatrix,
    SparsityPenaltySpec,
    apply_gate,
    convergence_interval,
    fixed_gate,
    init_gate,
    l1_density,
    project,
    select_gate_rows,
    sparsity_penalty,
    sparsity_penalty_grad,
)
from .model import ForwardTrace, TinyCSGNet, filter_weight_vectors, input_gradient
from .training import TrainConfig, TrainHistory, Trainer, cross_entropy, evaluate, is_csg_epoch, train

__all__ = [
    "DegenerateColumnError",
    "GateMatrix",
    "SparsityPenaltySpec",
    "apply_gate",
    "convergence_interval",
    "fixed_gate",
    "init_gate",
    "l1_density",
    "project",
    "select_gate_rows",
    "sparsity_penalty",
    "sparsity_penalty_grad",
    "ForwardTrace",
    "TinyCSGNet",
    "filter_weight_vectors",
    "input_gradient",
    "TrainConfig",
    "TrainHistory",
    "Trainer",
    "cross_entropy",
    "evaluate",
    "is_csg_epoch",
    "train",
    "__version__",
]
