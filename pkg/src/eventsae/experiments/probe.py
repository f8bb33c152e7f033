"""Episode-level success probe on mean-pooled hidden-state summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import balanced_accuracy_score
from sklearn.model_selection import StratifiedKFold

from ..errors import DegenerateClassSplit

CONDITIONS = ("sae_codes", "raw_hidden", "task_id_only", "shuffled_labels")


@dataclass
class ProbeConfig:
    folds: int = 5
    iterations: int = 500
    learning_rate: float = 0.1
    l2: float = 1.0


@dataclass
class ProbeResult:
    balanced_accuracy: dict
    folds: int
    seed: int
    per_fold: dict = field(default_factory=dict, repr=False)


def fit_logistic(X, y, iterations=500, learning_rate=0.1, l2=1.0):
    """Full-batch gradient descent on mean cross-entropy + l2/(2n) ||w||^2.

    The intercept is not penalized. Returns ``(w, b)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    w = np.zeros(p)
    b = 0.0
    for _ in range(iterations):
        s = X @ w + b
        prob = 0.5 * (1.0 + np.tanh(0.5 * s))  # overflow-free sigmoid
        err = prob - y
        w -= learning_rate * (X.T @ err / n + (l2 / n) * w)
        b -= learning_rate * err.mean()
    return w, b


def _standardize(train, test):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def cv_balanced_accuracy(X, y, folds=5, seed=0, config=ProbeConfig()):
    """Mean balanced accuracy over stratified folds, plus the per-fold values."""
    y = np.asarray(y).astype(int)
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2:
        raise DegenerateClassSplit(f"need >= 2 episodes per class, have {counts.tolist()}")
    if counts.min() < folds:
        raise DegenerateClassSplit(
            f"{folds}-fold stratification needs >= {folds} episodes per class, have {counts.tolist()}")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    scores = []
    for tr, te in skf.split(X, y):
        Xtr, Xte = _standardize(X[tr], X[te])
        w, b = fit_logistic(Xtr, y[tr], config.iterations, config.learning_rate, config.l2)
        pred = (Xte @ w + b > 0).astype(int)
        scores.append(balanced_accuracy_score(y[te], pred))
    return float(np.mean(scores)), scores


def episode_features(rset, params, layer):
    """Per-rollout mean-pooled SAE codes and raw states, task one-hots, labels."""
    tasks = [t["task_id"] for t in rset.tasks]
    codes, raw, onehot, y = [], [], [], []
    for r in rset.rollouts:
        H = r.rows(layer)[0].astype(np.float64)
        codes.append(params.encode(H, mode="inference").mean(axis=0))
        raw.append(H.mean(axis=0))
        e = np.zeros(len(tasks))
        e[tasks.index(r.task_id)] = 1.0
        onehot.append(e)
        y.append(int(r.success))
    return np.array(codes), np.array(raw), np.array(onehot), np.array(y)


def success_probe(rset, params, layer, folds=5, seed=0, config=None):
    """Balanced accuracy for the four probe conditions."""
    config = config or ProbeConfig(folds=folds)
    codes, raw, onehot, y = episode_features(rset, params, layer)
    shuffled = np.random.default_rng(seed).permutation(y)
    inputs = {"sae_codes": (codes, y), "raw_hidden": (raw, y),
              "task_id_only": (onehot, y), "shuffled_labels": (codes, shuffled)}
    acc, per_fold = {}, {}
    for name in CONDITIONS:
        X, labels = inputs[name]
        acc[name], per_fold[name] = cv_balanced_accuracy(X, labels, folds, seed, config)
    return ProbeResult(acc, folds, seed, per_fold)
