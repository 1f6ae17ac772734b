"""Adversarial sample generation and the feature-based detector harness.

Attacks are white-box sign-gradient methods (one-shot and iterative) under
an L-infinity budget; both the budget and the [0,1] range are enforced
exactly on every emitted sample.  Detection trains a random forest on
concatenated per-layer pooled features of clean vs attacked images.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .training import _ce_and_grad

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    method: str = "fgsm"              # 'fgsm' or 'pgd'
    epsilon: float = 0.031
    iterations: int = 7               # pgd only
    step_size: float | None = None    # pgd only; default 2.5*eps/iterations
    targeted: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.method == "pgd":
            if self.iterations < 1:
                raise ValueError("pgd needs iterations >= 1")
            if self.step_size is not None and self.step_size <= 0:
                raise ValueError("step_size must be positive")

    @property
    def resolved_step_size(self):
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.iterations


def random_targets(labels, num_classes, seed=0):
    """A uniformly random wrong class per sample, deterministic under seed."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, num_classes, size=labels.shape[0])
    return (labels + shift) % num_classes


def _loss_input_grad(model, images, labels):
    cache = model._run(images, keep_ctx=True, check_finite=False)
    loss, dlogits = _ce_and_grad(cache["logits"], labels)
    res = model.backward(cache, {"logits": dlogits},
                         need_param_grads=False, need_input_grad=True)
    return loss, res["input_grad"]


def _enforce_budget(x_adv, x0, eps):
    """Clamp to [0,1] and nudge any float-rounding overshoot back inside the
    ball, so measured constraints hold exactly."""
    np.clip(x_adv, 0.0, 1.0, out=x_adv)
    for _ in range(3):
        delta = x_adv - x0
        over = delta > eps
        under = delta < -eps
        if not (over.any() or under.any()):
            break
        x_adv[over] = np.nextafter(x_adv[over], -np.inf)
        x_adv[under] = np.nextafter(x_adv[under], np.inf)
    assert np.all(np.abs(x_adv - x0) <= eps)
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0
    return x_adv


def _signed_step(model, x, attack_labels, step, targeted):
    _, grad = _loss_input_grad(model, x, attack_labels)
    sign = np.sign(grad)
    # Targeted mode descends the target-class loss; untargeted ascends the
    # true-class loss.
    return x - step * sign if targeted else x + step * sign


def fgsm(model, images, attack_labels, cfg):
    """One signed-gradient step of size epsilon, clipped to [0,1].

    ``attack_labels`` are targets when cfg.targeted, else the true labels.
    """
    x0 = np.asarray(images, dtype=model.dtype)
    eps = model.dtype.type(cfg.epsilon)
    x_adv = _signed_step(model, x0, np.asarray(attack_labels), eps, cfg.targeted)
    return _enforce_budget(x_adv, x0, eps)


def pgd_attack(model, images, attack_labels, cfg):
    """Iterated signed-gradient steps, re-projected onto the epsilon ball
    after each step.  One iteration at step_size=epsilon reproduces fgsm."""
    x0 = np.asarray(images, dtype=model.dtype)
    eps = model.dtype.type(cfg.epsilon)
    step = model.dtype.type(cfg.resolved_step_size)
    labels = np.asarray(attack_labels)
    x = x0
    for _ in range(cfg.iterations):
        x = _signed_step(model, x, labels, step, cfg.targeted)
        np.clip(x, x0 - eps, x0 + eps, out=x)
        np.clip(x, 0.0, 1.0, out=x)
    return _enforce_budget(x, x0, eps)


def run_attack(model, images, labels, cfg):
    """Attack a batch; returns (adversarial images, attack labels used)."""
    if cfg.targeted:
        attack_labels = random_targets(labels, model.num_classes, cfg.seed)
    else:
        attack_labels = np.asarray(labels)
    fn = fgsm if cfg.method == "fgsm" else pgd_attack
    return fn(model, images, attack_labels, cfg), attack_labels


def attack_success_rate(model, images, adv_images, labels, batch_size=256):
    """Fraction of correctly classified samples whose prediction flips."""
    labels = np.asarray(labels)
    preds, preds_adv = [], []
    for start in range(0, labels.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        preds.append(model._run(images[sl])["logits"].argmax(axis=1))
        preds_adv.append(model._run(adv_images[sl])["logits"].argmax(axis=1))
    preds = np.concatenate(preds)
    preds_adv = np.concatenate(preds_adv)
    correct = preds == labels
    if not correct.any():
        return 0.0
    return float((preds_adv[correct] != labels[correct]).mean())


def extract_detection_features(model, images, batch_size=256):
    """Concatenated per-conv-layer pooled activations, one row per image."""
    rows = []
    for start in range(0, images.shape[0], batch_size):
        cache = model._run(images[start:start + batch_size])
        rows.append(np.concatenate(cache["per_layer_pooled"], axis=1))
    return np.concatenate(rows, axis=0)


def train_detector(train_normal, train_adv, test_normal, test_adv, seed=0):
    """Random forest separating clean from adversarial feature vectors.

    100 trees, bootstrap sampling, sqrt(d) feature subsampling, fixed seed.
    Returns (fitted forest, held-out error rate).
    """
    from sklearn.ensemble import RandomForestClassifier

    if len(train_normal) == 0 or len(train_adv) == 0:
        raise ValueError("both classes must be nonempty")
    x_train = np.concatenate([train_normal, train_adv])
    y_train = np.concatenate([np.zeros(len(train_normal), dtype=int),
                              np.ones(len(train_adv), dtype=int)])
    clf = RandomForestClassifier(
        n_estimators=100, bootstrap=True, max_features="sqrt",
        random_state=seed, n_jobs=1)
    clf.fit(x_train, y_train)
    x_test = np.concatenate([test_normal, test_adv])
    y_test = np.concatenate([np.zeros(len(test_normal), dtype=int),
                             np.ones(len(test_adv), dtype=int)])
    error = float((clf.predict(x_test) != y_test).mean())
    return clf, error


def detection_experiment(model, bundle, methods=("fgsm", "pgd"),
                         budgets=(50, 100, 200), repetitions=5,
                         epsilon=0.031, iterations=7, targeted=True, seed=0):
    """Clean-vs-adversarial detection error, swept over training budgets.

    Train features come from per-class subsets of the training split; test
    features from the full test split.  Each repetition resamples the
    training subset and reseeds the forest; the table reports mean error.
    """
    results = {}
    tr_x, tr_y = bundle.train_images, bundle.train_labels
    te_x, te_y = bundle.test_images, bundle.test_labels
    for method in methods:
        cfg = AttackConfig(method=method, epsilon=epsilon,
                           iterations=iterations, targeted=targeted, seed=seed)
        tr_adv, _ = run_attack(model, tr_x, tr_y, cfg)
        te_adv, _ = run_attack(model, te_x, te_y, cfg)
        feats_norm_tr = extract_detection_features(model, tr_x)
        feats_adv_tr = extract_detection_features(model, tr_adv)
        feats_norm_te = extract_detection_features(model, te_x)
        feats_adv_te = extract_detection_features(model, te_adv)
        per_budget = {}
        for budget in budgets:
            errors = []
            for rep in range(repetitions):
                rng = np.random.default_rng([seed, rep, budget])
                picks = []
                for c in range(model.num_classes):
                    idx = np.flatnonzero(tr_y == c)
                    take = min(budget, idx.size)
                    picks.append(rng.choice(idx, size=take, replace=False))
                picks = np.concatenate(picks)
                _, err = train_detector(
                    feats_norm_tr[picks], feats_adv_tr[picks],
                    feats_norm_te, feats_adv_te, seed=rep)
                errors.append(err)
            per_budget[budget] = {
                "mean_error": float(np.mean(errors)),
                "errors": [float(e) for e in errors],
            }
        results[method] = per_budget
    return results
