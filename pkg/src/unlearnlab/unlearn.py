"""Unlearning methods that start from the original parameters.

Every method returns an :class:`UnlearnTrajectory` holding the starting
point and one checkpoint per epoch, so callers can pick the best epoch after
the fact.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from .nn import (
    KL_TEACHER_STUDENT,
    ModelConfig,
    ParamVector,
    TrainConfig,
    _forward_cached,
    backward,
    build_model,
    ce_logit_grad,
    cross_entropy,
    forward,
    kl_divergence,
    kl_logit_grad,
    train,
)

SCRUB = "scrub"
NEGGRAD = "neggrad"
L1SPARSITY = "l1sparsity"
FINETUNE = "finetune"
RETRAIN = "retrain"
METHODS = (SCRUB, NEGGRAD, L1SPARSITY, FINETUNE, RETRAIN)


@dataclass(frozen=True)
class MethodHyperparams:
    method: str
    alpha: float = 0.0
    gamma: float = 0.0
    learning_rate: float = 0.01
    epochs: int = 10
    l1_ratio: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.alpha < 0 or self.gamma < 0:
            raise ValueError("alpha and gamma must be nonnegative")
        if self.method == NEGGRAD and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"neggrad alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.l1_ratio <= 1.0:
            raise ValueError("l1_ratio must lie in [0, 1]")
        if self.learning_rate < 0 or self.epochs < 1:
            raise ValueError("learning_rate must be >= 0 and epochs >= 1")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "l1_ratio": self.l1_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MethodHyperparams":
        return cls(**{k: d[k] for k in ("method", "alpha", "gamma", "learning_rate", "epochs", "l1_ratio") if k in d})


@dataclass(frozen=True)
class HyperGrid:
    """Cartesian grid over named axes, enumerated lexicographically in declared order."""

    method: str
    axes: tuple[tuple[str, tuple[float, ...]], ...]
    fixed: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        axes = tuple((name, tuple(vals)) for name, vals in (self.axes.items() if isinstance(self.axes, Mapping) else self.axes))
        fixed = tuple(self.fixed.items()) if isinstance(self.fixed, Mapping) else tuple(self.fixed)
        if not axes or any(len(v) == 0 for _, v in axes):
            raise ValueError("grid axes must be nonempty")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "fixed", fixed)

    def __iter__(self) -> Iterator[MethodHyperparams]:
        names = [n for n, _ in self.axes]
        for combo in itertools.product(*(v for _, v in self.axes)):
            yield MethodHyperparams(method=self.method, **dict(self.fixed), **dict(zip(names, combo)))

    def __len__(self) -> int:
        return math.prod(len(v) for _, v in self.axes)

    def to_dict(self) -> dict:
        return {"method": self.method, "axes": {n: list(v) for n, v in self.axes}, "fixed": dict(self.fixed)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperGrid":
        return cls(d["method"], tuple((n, tuple(v)) for n, v in d["axes"].items()), tuple(d.get("fixed", {}).items()))


def default_grid(method: str, epochs: int = 10, l1_learning_rate: float = 0.01) -> HyperGrid:
    if method == SCRUB:
        return HyperGrid(
            SCRUB,
            (
                ("learning_rate", (0.0005, 0.001, 0.005, 0.01)),
                ("gamma", (0.1, 0.5, 0.9, 0.95, 0.99)),
                ("alpha", (0.001, 0.005, 0.01, 0.1, 0.5)),
            ),
            (("epochs", epochs),),
        )
    if method == NEGGRAD:
        return HyperGrid(
            NEGGRAD,
            (("learning_rate", (0.001, 0.01, 0.05, 0.1, 0.5)), ("alpha", (0.1, 0.5, 0.9, 0.999, 0.9999))),
            (("epochs", epochs),),
        )
    if method == L1SPARSITY:
        return HyperGrid(
            L1SPARSITY,
            (("gamma", (0.0001, 0.0005, 0.001, 0.005, 0.01)), ("l1_ratio", (0.0, 0.1, 0.3, 0.5, 0.8))),
            (("epochs", epochs), ("learning_rate", l1_learning_rate)),
        )
    if method == FINETUNE:
        return HyperGrid(FINETUNE, (("learning_rate", (0.001, 0.01, 0.05, 0.1)),), (("epochs", epochs),))
    raise ValueError(f"no default grid for {method!r}")


@dataclass(frozen=True)
class UnlearnSettings:
    """Knobs shared by all methods that are not tuned."""

    seed: int = 0
    momentum: float = 0.9
    retain_batch_size: int = 256
    kl_direction: str = KL_TEACHER_STUDENT


@dataclass
class UnlearnTrajectory:
    checkpoints: list[tuple[int, ParamVector]]
    hyperparams: MethodHyperparams
    objective: list[float] = field(default_factory=list)
    seconds: float = 0.0
    diverged_at: int | None = None

    @property
    def final(self) -> ParamVector:
        return self.checkpoints[-1][1]

    def at(self, epoch: int) -> ParamVector:
        for e, w in self.checkpoints:
            if e == epoch:
                return w
        raise KeyError(epoch)


# -- composite objectives ------------------------------------------------------

# Objectives return (value, flat grad); with need_grad=False the grad is None.

def _ce_part(w: ParamVector, X, y, weight: float, need_grad: bool = True):
    logits, acts = _forward_cached(w, X)
    value = weight * float(cross_entropy(logits, y).mean())
    if not need_grad:
        return value, None
    return value, backward(w, acts, ce_logit_grad(logits, y) * (weight / len(y)))


def _kl_part(w: ParamVector, X, teacher_logits, weight: float, direction: str, need_grad: bool = True):
    logits, acts = _forward_cached(w, X)
    if direction == KL_TEACHER_STUDENT:
        kl = kl_divergence(teacher_logits, logits)
    else:
        kl = kl_divergence(logits, teacher_logits)
    value = weight * float(kl.mean())
    if not need_grad:
        return value, None
    return value, backward(w, acts, kl_logit_grad(teacher_logits, logits, direction) * (weight / len(X)))


def _accumulate(parts):
    value = 0.0
    grad = None
    for v, g in parts:
        value += v
        if g is not None:
            grad = g if grad is None else grad + g
    return value, grad


class ScrubObjective:
    """alpha * mean retain KL + gamma * mean retain CE - mean forget KL."""

    def __init__(self, teacher: ParamVector, X_forget, alpha: float, gamma: float, direction: str = KL_TEACHER_STUDENT):
        self.teacher = teacher
        self.X_forget = np.asarray(X_forget, dtype=np.float64)
        self.teacher_forget = forward(teacher, self.X_forget)
        self.alpha = alpha
        self.gamma = gamma
        self.direction = direction

    def __call__(self, w: ParamVector, Xb, yb, need_grad: bool = True):
        parts = []
        if self.alpha != 0.0:
            parts.append(_kl_part(w, Xb, forward(self.teacher, Xb), self.alpha, self.direction, need_grad))
        if self.gamma != 0.0:
            parts.append(_ce_part(w, Xb, yb, self.gamma, need_grad))
        parts.append(_kl_part(w, self.X_forget, self.teacher_forget, -1.0, self.direction, need_grad))
        return _accumulate(parts)


class NegGradObjective:
    """alpha * mean retain CE - (1 - alpha) * mean forget CE."""

    def __init__(self, X_forget, y_forget, alpha: float):
        self.X_forget = np.asarray(X_forget, dtype=np.float64)
        self.y_forget = np.asarray(y_forget)
        self.alpha = alpha

    def __call__(self, w: ParamVector, Xb, yb, need_grad: bool = True):
        parts = [_ce_part(w, Xb, yb, self.alpha, need_grad)]
        forget_weight = 1.0 - self.alpha
        if forget_weight != 0.0:
            parts.append(_ce_part(w, self.X_forget, self.y_forget, -forget_weight, need_grad))
        return _accumulate(parts)


class L1Objective:
    """Mean retain CE + gamma * ||w||_1 with sign(0) = 0."""

    def __init__(self, gamma: float):
        self.gamma = gamma

    def __call__(self, w: ParamVector, Xb, yb, need_grad: bool = True):
        value, grad = _ce_part(w, Xb, yb, 1.0, need_grad)
        if self.gamma != 0.0:
            value += self.gamma * float(np.abs(w.values).sum())
            if need_grad:
                grad = grad + self.gamma * np.sign(w.values)
        return value, grad


def finetune_objective(w: ParamVector, Xb, yb, need_grad: bool = True):
    return _ce_part(w, Xb, yb, 1.0, need_grad)


# -- methods -------------------------------------------------------------------

def _run(w0, X_retain, y_retain, hp: MethodHyperparams, settings: UnlearnSettings, objective, epoch_hook=None, full_objective=None):
    if len(X_retain) == 0:
        raise ValueError("retain set is empty")
    cfg = TrainConfig(
        learning_rate=hp.learning_rate,
        momentum=settings.momentum,
        epochs=hp.epochs,
        batch_size=settings.retain_batch_size,
        seed=settings.seed,
    )
    start = time.perf_counter()
    states = train(w0, X_retain, y_retain, cfg, objective, epoch_hook=epoch_hook)
    elapsed = time.perf_counter() - start
    evaluate = full_objective or objective
    values = [float(evaluate(w, X_retain, y_retain, need_grad=False)[0]) for w in states]
    return UnlearnTrajectory(list(enumerate(states)), hp, values, elapsed)


def _check_pair(w0: ParamVector, X):
    if len(X) == 0:
        raise ValueError("forget set is empty")
    if np.shape(X)[1] != w0.config.input_dim:
        raise ValueError("forget inputs do not match the model input dimension")


def scrub(w0: ParamVector, retain, forget, hp: MethodHyperparams, settings: UnlearnSettings = UnlearnSettings()) -> UnlearnTrajectory:
    """Joint descent on the teacher-student objective; the teacher is frozen at ``w0``.

    ``retain`` is ``(X, y)``; ``forget`` is ``(X, y)`` or just ``X`` (labels unused).
    """
    X_r, y_r = retain
    X_f = forget[0] if isinstance(forget, tuple) else forget
    _check_pair(w0, X_f)
    obj = ScrubObjective(w0.copy(), X_f, hp.alpha, hp.gamma, settings.kl_direction)
    return _run(w0, X_r, y_r, hp, settings, obj)


def neggrad(w0: ParamVector, retain, forget, hp: MethodHyperparams, settings: UnlearnSettings = UnlearnSettings()) -> UnlearnTrajectory:
    X_r, y_r = retain
    X_f, y_f = forget
    _check_pair(w0, X_f)
    if hp.alpha == 1.0:
        # forget term vanishes: identical to fine-tuning
        return _run(w0, X_r, y_r, hp, settings, finetune_objective)
    return _run(w0, X_r, y_r, hp, settings, NegGradObjective(X_f, y_f, hp.alpha))


def l1_sparsity(w0: ParamVector, retain, hp: MethodHyperparams, settings: UnlearnSettings = UnlearnSettings()) -> UnlearnTrajectory:
    """Penalised fine-tuning for the first ``ceil(l1_ratio * epochs)`` epochs, then plain fine-tuning."""
    X_r, y_r = retain
    if hp.gamma == 0.0:
        return _run(w0, X_r, y_r, hp, settings, finetune_objective)
    penalty_epochs = math.ceil(hp.l1_ratio * hp.epochs)
    penalised = L1Objective(hp.gamma)

    def hook(epoch: int):
        return penalised if epoch <= penalty_epochs else finetune_objective

    return _run(w0, X_r, y_r, hp, settings, finetune_objective, epoch_hook=hook, full_objective=penalised)


def finetune(w0: ParamVector, retain, hp: MethodHyperparams, settings: UnlearnSettings = UnlearnSettings()) -> UnlearnTrajectory:
    X_r, y_r = retain
    return _run(w0, X_r, y_r, hp, settings, finetune_objective)


def retrain_oracle(retain, model_cfg: ModelConfig, train_cfg: TrainConfig) -> ParamVector:
    """Fresh initialization trained only on the retain set."""
    X_r, y_r = retain
    if len(X_r) == 0:
        raise ValueError("retain set is empty")
    return train(build_model(model_cfg), X_r, y_r, train_cfg)[-1]


def run_method(w0: ParamVector, retain, forget, hp: MethodHyperparams, settings: UnlearnSettings = UnlearnSettings()) -> UnlearnTrajectory:
    """Dispatch on ``hp.method``; forget-free methods never see ``forget``."""
    if hp.method == SCRUB:
        return scrub(w0, retain, forget, hp, settings)
    if hp.method == NEGGRAD:
        return neggrad(w0, retain, forget, hp, settings)
    if hp.method == L1SPARSITY:
        return l1_sparsity(w0, retain, hp, settings)
    if hp.method == FINETUNE:
        return finetune(w0, retain, hp, settings)
    raise ValueError(f"{hp.method!r} is not an unlearning method over w0")


def with_epochs(hp: MethodHyperparams, epochs: int) -> MethodHyperparams:
    return replace(hp, epochs=epochs)
