"""Dense ReLU networks on a flat parameter vector.

Everything here works on a single contiguous float64 array so that
optimizers, the l1 penalty and finite-difference checks can treat the model
as a plain vector. Layer weights and biases are views into that array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

KL_TEACHER_STUDENT = "teacher_student"
KL_STUDENT_TEACHER = "student_teacher"


class NonFiniteLossError(FloatingPointError):
    """Raised when an objective or its gradient stops being finite.

    ``checkpoints`` holds the states completed before the failure (starting
    with the initial parameters), so callers may salvage a truncated run.
    """

    def __init__(self, message: str, epoch: int = 0, batch: int = 0, checkpoints=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.checkpoints = checkpoints or []


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    base_widths: tuple[int, ...] = (128, 128)
    width_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "base_widths", tuple(int(c) for c in self.base_widths))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if any(c < 1 for c in self.base_widths):
            raise ValueError(f"base widths must be positive, got {self.base_widths}")
        if not 0.0 < self.width_scale <= 1.0:
            raise ValueError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        # floor(c * s) clamped to 1 so tiny scales stay runnable
        return tuple(max(1, math.floor(c * self.width_scale)) for c in self.base_widths)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.num_classes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "base_widths": list(self.base_widths),
            "width_scale": self.width_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            base_widths=tuple(d["base_widths"]),
            width_scale=float(d["width_scale"]),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class Layout:
    """Offsets of each layer's weight matrix and bias inside the flat vector."""

    sizes: tuple[int, ...]

    @property
    def segments(self) -> list[tuple[int, int, int, int]]:
        # (weight_start, bias_start, fan_in, fan_out) per layer
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            out.append((pos, pos + fan_in * fan_out, fan_in, fan_out))
            pos += fan_in * fan_out + fan_out
        return out

    @property
    def size(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def unpack(self, values: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        for w0, b0, fan_in, fan_out in self.segments:
            W = values[w0:b0].reshape(fan_in, fan_out)
            b = values[b0 : b0 + fan_out]
            layers.append((W, b))
        return layers


@dataclass
class ParamVector:
    values: np.ndarray
    config: ModelConfig
    layout: Layout = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.layout = Layout(self.config.layer_sizes)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise ValueError(
                f"parameter vector of length {self.values.size} does not match "
                f"architecture {self.config.layer_sizes} ({self.layout.size} params)"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.config)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.config)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self.layout.unpack(self.values)

    def same_architecture(self, other: "ParamVector") -> bool:
        return self.config.layer_sizes == other.config.layer_sizes

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def build_model(config: ModelConfig) -> ParamVector:
    """Initialize parameters with fan-in scaled uniform weights and zero biases."""
    rng = np.random.default_rng(config.seed)
    layout = Layout(config.layer_sizes)
    values = np.zeros(layout.size)
    for w0, b0, fan_in, fan_out in layout.segments:
        bound = math.sqrt(6.0 / fan_in)
        values[w0:b0] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return ParamVector(values, config)


def _check_inputs(w: ParamVector, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != w.config.input_dim:
        raise ValueError(f"input has dimension {X.shape[1]}, model expects {w.config.input_dim}")
    return X


def forward(w: ParamVector, X: np.ndarray) -> np.ndarray:
    """Logits for a single input (shape ``(d,)``) or a batch (shape ``(n, d)``)."""
    single = np.ndim(X) == 1
    h = _check_inputs(w, X)
    layers = w.layers()
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
    W, b = layers[-1]
    logits = h @ W + b
    return logits[0] if single else logits


def _forward_cached(w: ParamVector, X: np.ndarray):
    acts = [X]
    layers = w.layers()
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, acts


def backward(w: ParamVector, acts: list[np.ndarray], dlogits: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dlogits * logits)`` with respect to the flat parameters."""
    grad = np.zeros_like(w.values)
    layers = w.layers()
    delta = dlogits
    for i in range(len(layers) - 1, -1, -1):
        w0, b0, fan_in, fan_out = w.layout.segments[i]
        a = acts[i]
        grad[w0:b0] = (a.T @ delta).ravel()
        grad[b0 : b0 + fan_out] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ layers[i][0].T) * (a > 0)
    return grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def predict(w: ParamVector, X: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Argmax class per row; ties go to the smallest class index."""
    X = _check_inputs(w, X)
    if len(X) <= chunk:
        return forward(w, X).argmax(axis=1)
    return np.concatenate([forward(w, X[i : i + chunk]).argmax(axis=1) for i in range(0, len(X), chunk)])


def cross_entropy(logits: np.ndarray, y) -> np.ndarray | float:
    """Per-example ``-log softmax(logits)[y]``; labels are 0-based class indices."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    C = logits.shape[-1]
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError(f"label out of range for {C} classes")
    lp = log_softmax(logits)
    if lp.ndim == 1:
        return float(max(-lp[int(y)], 0.0))
    return np.maximum(-lp[np.arange(len(y)), y], 0.0)


def kl_divergence(logits_p: np.ndarray, logits_q: np.ndarray) -> np.ndarray:
    """Row-wise KL(softmax(p) || softmax(q))."""
    lp = log_softmax(np.asarray(logits_p, dtype=np.float64))
    lq = log_softmax(np.asarray(logits_q, dtype=np.float64))
    return np.maximum((np.exp(lp) * (lp - lq)).sum(axis=-1), 0.0)


def kl_softmax(x, w_teacher: ParamVector, w_student: ParamVector, direction: str = KL_TEACHER_STUDENT):
    """KL divergence between the two models' softmax outputs on ``x``.

    ``direction`` selects KL(teacher || student) (default) or the reverse.
    Returns a float for a single input and an array for a batch.
    """
    if not w_teacher.same_architecture(w_student):
        raise ValueError("teacher and student architectures differ")
    zt = forward(w_teacher, x)
    zs = forward(w_student, x)
    if direction == KL_TEACHER_STUDENT:
        out = kl_divergence(zt, zs)
    elif direction == KL_STUDENT_TEACHER:
        out = kl_divergence(zs, zt)
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return float(out) if np.ndim(out) == 0 else out


# -- logit-space gradients ---------------------------------------------------
# Each returns d(loss_i)/d(logits_i) per row; callers scale and backprop.

def ce_logit_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    return g


def kl_logit_grad(teacher_logits: np.ndarray, student_logits: np.ndarray, direction: str) -> np.ndarray:
    """Gradient of the KL term with respect to the student logits."""
    ls = log_softmax(student_logits)
    lt = log_softmax(teacher_logits)
    ps = np.exp(ls)
    if direction == KL_TEACHER_STUDENT:
        return ps - np.exp(lt)
    if direction == KL_STUDENT_TEACHER:
        diff = ls - lt
        kl = (ps * diff).sum(axis=1, keepdims=True)
        return ps * (diff - kl)
    raise ValueError(f"unknown KL direction {direction!r}")


def loss_and_grad(w: ParamVector, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient."""
    logits, acts = _forward_cached(w, X)
    loss = float(cross_entropy(logits, y).mean())
    return loss, backward(w, acts, ce_logit_grad(logits, y) / len(y))


# An objective maps (params, batch inputs, batch labels) to (loss, flat grad).
Objective = Callable[[ParamVector, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(
    w_init: ParamVector,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    loss_spec: Objective | None = None,
    epoch_hook: Callable[[int], Objective | None] | None = None,
) -> list[ParamVector]:
    """Mini-batch SGD with heavy-ball momentum.

    Returns ``cfg.epochs + 1`` checkpoints: the initial parameters followed by
    the parameters at the end of every epoch. ``epoch_hook(epoch)`` may swap
    the objective at the start of an epoch (used for phased schedules).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    _check_inputs(w_init, X[:1])
    objective = loss_spec or loss_and_grad
    rng = np.random.default_rng(cfg.seed)
    values = w_init.values.copy()
    velocity = np.zeros_like(values)
    checkpoints = [w_init.copy()]
    for epoch in range(1, cfg.epochs + 1):
        if epoch_hook is not None:
            swapped = epoch_hook(epoch)
            if swapped is not None:
                objective = swapped
        for b, idx in enumerate(batches(len(X), cfg.batch_size, rng)):
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = objective(ParamVector(values, w_init.config), X[idx], y[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NonFiniteLossError(
                    f"non-finite objective at epoch {epoch}, batch {b}: {loss}", epoch, b, checkpoints
                )
            if cfg.learning_rate == 0.0:
                continue
            velocity = cfg.momentum * velocity + grad
            values = values - cfg.learning_rate * velocity
        if not np.all(np.isfinite(values)):
            raise NonFiniteLossError(f"parameters became non-finite at epoch {epoch}", epoch, 0, checkpoints)
        checkpoints.append(ParamVector(values.copy(), w_init.config))
    return checkpoints


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5, coords: Sequence[int] | None = None) -> np.ndarray:
    """Central finite differences of ``f`` at ``x`` (optionally only at ``coords``)."""
    x = np.asarray(x, dtype=np.float64)
    idx = range(x.size) if coords is None else coords
    out = np.zeros(x.size)
    for i in idx:
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (f(x + e) - f(x - e)) / (2 * step)
    return out
