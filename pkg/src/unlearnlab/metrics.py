"""Error rates, validation scores and the loss-based membership inference attack."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DerivedSplits, LabeledDataset
from .nn import ParamVector, cross_entropy, forward, predict

PRIVACY = "privacy"
BIAS = "bias"

REPORT_COLUMNS = (
    "model_id",
    "width_scale",
    "method",
    "lambda",
    "goal",
    "test_err",
    "forget_err",
    "forget_test_err",
    "val_err",
    "val_forget_err",
    "mia_acc",
    "seed",
)


@dataclass(frozen=True)
class ErrorReport:
    test_err: float
    forget_err: float
    forget_test_err: float
    val_err: float
    val_forget_err: float
    counts: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GoalSpec:
    goal: str
    lam: float

    def __post_init__(self):
        if self.goal not in (PRIVACY, BIAS):
            raise ValueError(f"unknown goal {self.goal!r}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must lie strictly inside (0, 1), got {self.lam}")

    def score(self, report: ErrorReport | dict) -> float:
        r = report if isinstance(report, dict) else report.as_dict()
        if self.goal == PRIVACY:
            return privacy_score(r["forget_err"], r["val_forget_err"], r["val_err"], self.lam)
        return bias_score(r["forget_err"], r["val_err"], self.lam)


@dataclass(frozen=True)
class MIAReport:
    accuracy: float
    fold_accuracies: tuple[float, ...]
    member_count: int
    nonmember_count: int


def classification_error(w: ParamVector, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction of examples whose argmax prediction differs from the label."""
    if len(y) == 0:
        raise ValueError("cannot compute an error rate on an empty set")
    return float(np.count_nonzero(predict(w, X) != np.asarray(y)) / len(y))


def _maybe_error(w, dataset: LabeledDataset, idx) -> float:
    return classification_error(w, *dataset.subset(idx)) if len(idx) else math.nan


def error_report(w: ParamVector, dataset: LabeledDataset, forget: np.ndarray, derived: DerivedSplits) -> ErrorReport:
    """All five error rates; a rate over an empty set is reported as NaN."""
    sets = {
        "test_err": dataset.indices("test"),
        "forget_err": np.asarray(forget),
        "forget_test_err": derived.forget_test,
        "val_err": dataset.indices("val"),
        "val_forget_err": derived.val_forget,
    }
    rates = {k: _maybe_error(w, dataset, idx) for k, idx in sets.items()}
    return ErrorReport(**rates, counts={k: int(len(idx)) for k, idx in sets.items()})


def privacy_score(forget_err: float, val_forget_err: float, val_err: float, lam: float) -> float:
    return lam * abs(forget_err - val_forget_err) + (1.0 - lam) * val_err


def bias_score(forget_err: float, val_err: float, lam: float) -> float:
    return -lam * forget_err + (1.0 - lam) * val_err


def fit_logistic_1d(features, labels, epochs: int = 500, lr: float = 0.5) -> tuple[float, float]:
    """Full-batch gradient descent on the logistic loss of a scalar feature.

    The feature is standardized for conditioning; the returned ``(weight, bias)``
    apply to the raw feature.
    """
    x = np.asarray(features, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if len(x) < 2 or len(np.unique(t)) < 2:
        raise ValueError("logistic fit needs at least two examples from both classes")
    mu = x.mean()
    sd = x.std()
    sd = sd if sd > 0 else 1.0
    z = (x - mu) / sd
    a = b = 0.0
    for _ in range(epochs):
        p = 0.5 * (1.0 + np.tanh(0.5 * (a * z + b)))
        err = p - t
        a -= lr * float(np.mean(err * z))
        b -= lr * float(np.mean(err))
    return a / sd, b - a * mu / sd


def logistic_predict(features, weight: float, bias: float) -> np.ndarray:
    return (weight * np.asarray(features, dtype=np.float64) + bias > 0).astype(np.int64)


def mia_from_losses(member_losses, nonmember_losses, folds: int = 5, seed: int = 0, epochs: int = 500, lr: float = 0.5) -> MIAReport:
    """Balanced k-fold cross-validated logistic attack on per-example losses."""
    rng = np.random.default_rng(seed)
    m = np.asarray(member_losses, dtype=np.float64)
    n = np.asarray(nonmember_losses, dtype=np.float64)
    k = min(len(m), len(n))
    if k < folds:
        raise ValueError(f"need at least {folds} members and nonmembers, got {len(m)} and {len(n)}")
    m = m[np.sort(rng.choice(len(m), size=k, replace=False))]
    n = n[np.sort(rng.choice(len(n), size=k, replace=False))]
    # stratified folds: each fold gets an equal share of both classes
    fold_m = np.array_split(rng.permutation(k), folds)
    fold_n = np.array_split(rng.permutation(k), folds)
    accs = []
    for i in range(folds):
        train_m = np.concatenate([f for j, f in enumerate(fold_m) if j != i])
        train_n = np.concatenate([f for j, f in enumerate(fold_n) if j != i])
        feats = np.concatenate([m[train_m], n[train_n]])
        labs = np.concatenate([np.ones(len(train_m)), np.zeros(len(train_n))])
        wt, bs = fit_logistic_1d(feats, labs, epochs, lr)
        held = np.concatenate([m[fold_m[i]], n[fold_n[i]]])
        truth = np.concatenate([np.ones(len(fold_m[i])), np.zeros(len(fold_n[i]))])
        accs.append(float(np.mean(logistic_predict(held, wt, bs) == truth)))
    return MIAReport(float(np.mean(accs)), tuple(accs), k, k)


def per_example_loss(w: ParamVector, X, y) -> np.ndarray:
    return cross_entropy(forward(w, np.asarray(X)), np.asarray(y))


def mia_accuracy(w: ParamVector, members, nonmembers, folds: int = 5, seed: int = 0) -> MIAReport:
    """Membership attack with forget examples as members and forget-test examples as nonmembers.

    ``members`` and ``nonmembers`` are ``(X, y)`` pairs.
    """
    return mia_from_losses(per_example_loss(w, *members), per_example_loss(w, *nonmembers), folds, seed)


def report_row(
    model_id: str,
    width_scale: float,
    method: str,
    lam: float | str,
    goal: str,
    report: ErrorReport,
    mia_acc: float | None,
    seed: int,
) -> dict:
    return {
        "model_id": model_id,
        "width_scale": width_scale,
        "method": method,
        "lambda": lam,
        "goal": goal,
        "test_err": report.test_err,
        "forget_err": report.forget_err,
        "forget_test_err": report.forget_test_err,
        "val_err": report.val_err,
        "val_forget_err": report.val_forget_err,
        "mia_acc": "" if mia_acc is None else mia_acc,
        "seed": seed,
    }
