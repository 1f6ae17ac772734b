"""The class-by-filter gate matrix and its constraint set.

The gate ``G`` is a dense C-by-K matrix with entries in [0, 1].  Row ``c``
multiplicatively masks the penultimate activation channels whenever a sample
of class ``c`` runs through the gated path.  Every column is kept at
L-infinity norm 1 by projection (divide by the column max, then clip), so
each filter stays fully open for at least one class.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class DegenerateColumnError(ValueError):
    """A gate column with no positive entry cannot be L-inf normalized."""

    def __init__(self, column):
        self.column = int(column)
        super().__init__(
            f"gate column {column} has no positive entry; projection undefined"
        )


class PenaltyKind(str, Enum):
    L1 = "l1"
    L2 = "l2"
    SMOOTH_L1 = "smooth_l1"


@dataclass
class SparsityPenaltySpec:
    """How the excess of ||G||_1 over the budget ``g`` is penalized.

    ``g`` must be at least the filter count: each column carries mass >= 1
    after projection, so any smaller budget would be unreachable.
    """

    g: float
    num_filters: int
    psi: PenaltyKind = PenaltyKind.L1
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        self.psi = PenaltyKind(self.psi)
        self.g = float(self.g)
        if self.g < self.num_filters:
            raise ValueError(
                f"sparsity budget g={self.g} is below the filter count "
                f"K={self.num_filters}; ||G||_1 >= K always holds"
            )
        if self.psi is PenaltyKind.SMOOTH_L1 and self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")


@dataclass
class GateMatrix:
    """Validated gate state: float32 values in [0, 1], shape (C, K)."""

    values: np.ndarray
    frozen: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"gate must be a non-empty 2-D matrix, got shape {v.shape}")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("gate entries must lie in [0, 1]")
        self.values = v

    @property
    def num_classes(self):
        return self.values.shape[0]

    @property
    def num_filters(self):
        return self.values.shape[1]

    def copy(self):
        return GateMatrix(self.values.copy(), frozen=self.frozen)


def project_columns(values):
    """Divide each column by its max-absolute entry, then clip to [0, 1].

    Accepts raw (possibly out-of-range) values, e.g. right after a gradient
    step.  Raises DegenerateColumnError for any column whose entries are all
    <= 0, since dividing by a non-positive maximum is meaningless.
    """
    v = np.asarray(values, dtype=np.float32)
    col_max = v.max(axis=0)
    bad = np.flatnonzero(col_max <= 0.0)
    if bad.size:
        raise DegenerateColumnError(bad[0])
    scale = np.abs(v).max(axis=0)
    out = v / scale
    np.clip(out, 0.0, 1.0, out=out)
    # If a column's largest-magnitude entry was negative, clipping leaves its
    # max below 1; renormalize by the surviving positive max.
    post = out.max(axis=0)
    low = post < 1.0
    if np.any(low):
        out[:, low] /= post[low]
    return out


def project(gate):
    """Projection onto the constraint set, as a GateMatrix-to-GateMatrix op."""
    if isinstance(gate, GateMatrix):
        return GateMatrix(project_columns(gate.values), frozen=gate.frozen)
    return GateMatrix(project_columns(gate))


def init_gate(num_classes, num_filters):
    """Uniform 0.5 start, projected (every entry becomes exactly 1)."""
    return project(np.full((num_classes, num_filters), 0.5, dtype=np.float32))


def select_gate_rows(gate, labels):
    """Index gate rows by per-sample label; returns a (B, K) copy."""
    labels = np.asarray(labels)
    c = gate.num_classes
    bad = (labels < 0) | (labels >= c)
    if np.any(bad):
        offender = int(labels[np.argmax(bad)])
        raise IndexError(f"label {offender} out of range [0, {c})")
    return gate.values[labels].copy()


def apply_gate(activations, gate_rows):
    """Multiply each channel map by its per-sample gate value."""
    activations = np.asarray(activations)
    gate_rows = np.asarray(gate_rows)
    if activations.ndim != 4 or gate_rows.ndim != 2:
        raise ValueError("expected activations (B,K,H,W) and gate rows (B,K)")
    if activations.shape[:2] != gate_rows.shape:
        raise ValueError(
            f"batch/filter mismatch: activations {activations.shape[:2]} "
            f"vs gate rows {gate_rows.shape}"
        )
    return activations * gate_rows[:, :, None, None]


def _excess(gate, spec):
    l1 = float(np.abs(gate.values).sum())
    return l1 - spec.g


def sparsity_penalty(gate, spec):
    """psi(relu(||G||_1 - g)); exactly 0 at or below the budget."""
    r = _excess(gate, spec)
    if r <= 0.0:
        return 0.0
    if spec.psi is PenaltyKind.SMOOTH_L1:
        beta = spec.smooth_l1_beta
        return r * r / (2.0 * beta) if r < beta else r - 0.5 * beta
    return r


def sparsity_penalty_grad(gate, spec):
    """Gradient of the penalty w.r.t. every gate entry (0 at the kink)."""
    r = _excess(gate, spec)
    if r <= 0.0:
        return np.zeros_like(gate.values)
    if spec.psi is PenaltyKind.SMOOTH_L1:
        outer = min(r / spec.smooth_l1_beta, 1.0)
    else:
        outer = 1.0
    return (outer * np.sign(gate.values)).astype(np.float32)


def l1_density(gate):
    """||G||_1 normalized by the element count C*K; lies in [1/C, 1]."""
    return float(np.abs(gate.values).sum()) / gate.values.size


def convergence_interval(num_classes, num_filters, g):
    """Density interval [1/C, g/(C*K)] the training dynamics settle into.

    The lower end comes from the column constraint (each of the K columns
    carries mass >= 1), the upper end from the sparsity budget.
    """
    if num_classes < 1 or num_filters < 1:
        raise ValueError("num_classes and num_filters must be >= 1")
    if g < num_filters:
        raise ValueError(f"g={g} violates g >= K={num_filters}")
    return (1.0 / num_classes, float(g) / (num_classes * num_filters))


def fixed_gate(num_classes, num_filters, m1, m2):
    """Frozen block gate: class c owns filters [c*m1, (c+1)*m1); the last
    m2 filters are shared by every class."""
    if num_classes * m1 + m2 != num_filters:
        raise ValueError(
            f"C*m1 + m2 = {num_classes * m1 + m2} does not match K={num_filters}"
        )
    v = np.zeros((num_classes, num_filters), dtype=np.float32)
    for c in range(num_classes):
        v[c, c * m1:(c + 1) * m1] = 1.0
    if m2:
        v[:, num_classes * m1:] = 1.0
    return GateMatrix(v, frozen=True)
