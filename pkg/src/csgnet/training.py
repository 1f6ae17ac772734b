"""Alternating-epoch training of the gated objective.

One loss with three terms: ungated cross-entropy, gated cross-entropy
(weight lambda1), and the gate sparsity penalty (weight lambda2).  Epochs
alternate between the two paths on a fixed period; gated epochs take a
gradient step on the gate followed by the column projection, and update the
network weights against the same gated loss.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .gates import (
    DegenerateColumnError,
    SparsityPenaltySpec,
    init_gate,
    project,
    select_gate_rows,
    sparsity_penalty,
    sparsity_penalty_grad,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training aborted after repeated non-finite batch losses."""

    def __init__(self, epoch, batch, components):
        self.epoch = epoch
        self.batch = batch
        self.components = components
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}: {components}"
        )


def is_csg_epoch(epoch, period, n):
    """Gated-path epochs are those with ``epoch % period <= n``.

    With n=0 that is 1 gated epoch in every ``period``; n=1 gives 2, etc.
    """
    if period < 1:
        raise ValueError("period must be >= 1")
    if not 0 <= n < period:
        raise ValueError("csg_epochs_per_period must satisfy 0 <= n < period")
    return epoch % period <= n


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probabilities, labels):
    """Mean negative log-probability of the true class, in nats.

    Takes probability rows (validated to sum to 1 within 1e-5), not logits.
    Zero probabilities are clamped at 1e-12 so the result is never NaN.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise ValueError("expected probabilities (B,C) and labels (B,)")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise ValueError("probability rows must sum to 1 within 1e-5")
    if np.any((labels < 0) | (labels >= p.shape[1])):
        raise ValueError("label out of range")
    picked = p[np.arange(p.shape[0]), labels]
    return float(-np.log(np.clip(picked, 1e-12, None)).mean())


def _ce_and_grad(logits, labels):
    """Mean CE from logits plus its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    picked = p[np.arange(n), labels]
    loss = float(-np.log(np.clip(picked, 1e-12, None)).mean())
    dlogits = p
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


@dataclass
class TrainConfig:
    """Loss weights, schedule, and optimizer hyperparameters."""

    lambda1: float = 1.0
    lambda2: float = 10.0
    penalty: SparsityPenaltySpec | None = None  # defaults to g=K, L1 at train time
    period: int = 3
    csg_epochs_per_period: int = 0
    epochs: int = 60
    lr_theta: float = 0.05
    lr_gate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.csg_epochs_per_period < self.period:
            raise ValueError("need 0 <= csg_epochs_per_period < period")
        if self.lr_theta <= 0 or self.lr_gate <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainHistory:
    """Per-epoch records plus a terminal status."""

    epochs: list = field(default_factory=list)
    status: str = "completed"

    def append(self, record):
        self.epochs.append(record)

    def to_json_lines(self):
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.epochs) + "\n"

    def final(self, key):
        for rec in reversed(self.epochs):
            if rec.get(key) is not None:
                return rec[key]
        return None


class Trainer:
    """Owns the optimizer state for one model+gate pair."""

    def __init__(self, model, gate, cfg):
        self.model = model
        self.gate = gate
        self.cfg = cfg
        if cfg.penalty is None:
            self.penalty = SparsityPenaltySpec(
                g=float(gate.num_filters), num_filters=gate.num_filters)
        else:
            self.penalty = cfg.penalty
        self.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.gate_reseeds = 0
        self._bad_streak = 0

    # -- single-batch steps --------------------------------------------------

    def _theta_step(self, param_grads, scale=1.0):
        mu, lr = self.cfg.momentum, self.cfg.lr_theta
        for name, p in self.model.params.items():
            g = param_grads[name]
            if scale != 1.0:
                g = g * scale
            v = self.velocity[name]
            v *= mu
            v += g
            p -= lr * v

    def _check_finite(self, components, epoch, batch):
        if all(np.isfinite(v) for v in components.values()):
            self._bad_streak = 0
            return True
        self._bad_streak += 1
        log.warning("non-finite loss at epoch %d batch %d: %s", epoch, batch, components)
        if self._bad_streak >= 3:
            raise DivergenceError(epoch, batch, components)
        return False

    def csg_step(self, images, labels, epoch=0, batch=0):
        """One gated-path batch: gate step + projection, then a weight step."""
        cfg = self.cfg
        rows = select_gate_rows(self.gate, labels)
        cache = self.model._run(images, gate_rows=rows, keep_ctx=True,
                                check_finite=False)
        ce, dlogits = _ce_and_grad(cache["logits"], labels)
        pen = sparsity_penalty(self.gate, self.penalty)
        components = {"csg_ce": ce, "penalty": pen}
        if not self._check_finite(components, epoch, batch):
            return components

        res = self.model.backward(cache, {"logits": dlogits},
                                  need_gate_grad=not self.gate.frozen)
        if not self.gate.frozen:
            dgate = np.zeros_like(self.gate.values)
            np.add.at(dgate, labels, res["gate_rows_grad"])
            dgate *= cfg.lambda1
            dgate += cfg.lambda2 * sparsity_penalty_grad(self.gate, self.penalty)
            raw = self.gate.values - cfg.lr_gate * dgate
            while True:
                try:
                    self.gate = project(raw)
                    break
                except DegenerateColumnError as err:
                    # Re-seed the dead column to uniform and retry.
                    raw[:, err.column] = 0.5
                    self.gate_reseeds += 1
        self._theta_step(res["param_grads"], scale=cfg.lambda1)
        return components

    def std_step(self, images, labels, epoch=0, batch=0):
        """One ungated batch: plain supervised step on the weights."""
        cache = self.model._run(images, keep_ctx=True, check_finite=False)
        ce, dlogits = _ce_and_grad(cache["logits"], labels)
        components = {"std_ce": ce}
        if not self._check_finite(components, epoch, batch):
            return components
        res = self.model.backward(cache, {"logits": dlogits})
        self._theta_step(res["param_grads"])
        return components


def evaluate(model, images, labels, batch_size=256):
    """STD-path accuracy and confusion matrix over a dataset split."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    c = model.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        logits = model._run(images[sl])["logits"]
        pred = logits.argmax(axis=1)
        np.add.at(confusion, (labels[sl], pred), 1)
    accuracy = float(np.trace(confusion)) / n
    return accuracy, confusion


def _class_subset(labels, per_class, seed):
    """Deterministic per-class subsample of indices (for cheap train-split eval)."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if per_class < idx.size:
            idx = rng.choice(idx, size=per_class, replace=False)
        picks.append(np.sort(idx))
    return np.concatenate(picks)


def train(model, dataset, cfg, mode="csg", gate=None, mis_cadence=0,
          mi_neighbors=3, eval_train_per_class=0, checkpoint_fn=None):
    """Run the alternating schedule for ``cfg.epochs`` epochs.

    mode: 'csg' (learned gate), 'std' (never takes the gated path), or
    'fixed-gate' (gated schedule with a frozen gate, weights still learn).
    Returns (model, gate, TrainHistory); on divergence the history carries
    status='diverged' and the records collected so far.
    """
    if mode not in ("csg", "std", "fixed-gate"):
        raise ValueError(f"unknown training mode {mode!r}")
    tr_images, tr_labels = dataset.train_images, dataset.train_labels
    te_images, te_labels = dataset.test_images, dataset.test_labels
    if np.unique(tr_labels).size < model.num_classes:
        raise ValueError("every class needs at least one training sample")

    if gate is None:
        gate = init_gate(model.num_classes, model.num_filters)
    if mode == "fixed-gate" and not gate.frozen:
        raise ValueError("fixed-gate mode requires a frozen gate")
    trainer = Trainer(model, gate, cfg)
    history = TrainHistory()
    rng = np.random.default_rng(cfg.seed)
    n = tr_labels.shape[0]

    if eval_train_per_class:
        tr_eval_idx = _class_subset(tr_labels, eval_train_per_class, cfg.seed)
    else:
        tr_eval_idx = np.arange(n)

    for epoch in range(cfg.epochs):
        gated = mode != "std" and is_csg_epoch(
            epoch, cfg.period, cfg.csg_epochs_per_period)
        order = rng.permutation(n)
        sums, counts = {}, {}
        reseeds_before = trainer.gate_reseeds
        try:
            for bi, start in enumerate(range(0, n, cfg.batch_size)):
                take = order[start:start + cfg.batch_size]
                xb, yb = tr_images[take], tr_labels[take]
                if gated:
                    comp = trainer.csg_step(xb, yb, epoch, bi)
                else:
                    comp = trainer.std_step(xb, yb, epoch, bi)
                for key, val in comp.items():
                    sums[key] = sums.get(key, 0.0) + val
                    counts[key] = counts.get(key, 0) + 1
        except DivergenceError as err:
            history.status = "diverged"
            history.append({
                "epoch": epoch, "path": "CSG" if gated else "STD",
                "error": str(err),
            })
            log.error("training diverged: %s", err)
            return model, trainer.gate, history

        record = {
            "epoch": epoch,
            "path": "CSG" if gated else "STD",
            "std_ce": None, "csg_ce": None, "penalty": None,
            "l1_density": float(np.abs(trainer.gate.values).sum())
            / trainer.gate.values.size,
            "gate_reseeds": trainer.gate_reseeds - reseeds_before,
        }
        for key in sums:
            record[key] = sums[key] / counts[key]
        tr_acc, _ = evaluate(model, tr_images[tr_eval_idx], tr_labels[tr_eval_idx])
        te_acc, _ = evaluate(model, te_images, te_labels)
        record["train_accuracy"] = tr_acc
        record["test_accuracy"] = te_acc
        if mis_cadence and (epoch + 1) % mis_cadence == 0:
            from .metrics import mi_matrix, mis
            feats = collect_pooled_features(model, te_images)
            record["mis"] = mis(mi_matrix(feats, te_labels,
                                          k_neighbors=mi_neighbors,
                                          seed=cfg.seed))
        history.append(record)
        if checkpoint_fn is not None:
            nxt_gated = mode != "std" and epoch + 1 < cfg.epochs and is_csg_epoch(
                epoch + 1, cfg.period, cfg.csg_epochs_per_period)
            boundary = gated and not nxt_gated
            checkpoint_fn(model, trainer.gate, history, epoch,
                          boundary or epoch == cfg.epochs - 1)
    return model, trainer.gate, history


def collect_pooled_features(model, images, batch_size=256):
    """Penultimate pooled features for a whole split, batched."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        out.append(model._run(images[start:start + batch_size])["pooled_raw"])
    return np.concatenate(out, axis=0)
