"""Experiment configuration, stored as versioned JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .metrics import BIAS, PRIVACY
from .nn import KL_STUDENT_TEACHER, KL_TEACHER_STUDENT
from .unlearn import FINETUNE, L1SPARSITY, METHODS, NEGGRAD, RETRAIN, SCRUB, HyperGrid, default_grid

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    num_classes: int = 10
    dim: int = 20
    train_per_class: int = 100
    val_per_class: int = 20
    test_per_class: int = 100
    mean_radius: float = 3.0
    noise_sigma: float = 1.0

    def counts(self) -> dict:
        return {"train": self.train_per_class, "val": self.val_per_class, "test": self.test_per_class}


@dataclass(frozen=True)
class ModelSection:
    base_widths: tuple[int, ...] = (100, 100)
    width_scales: tuple[float, ...] = (0.05, 0.25, 1.0)


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 128


@dataclass(frozen=True)
class ForgetSection:
    count: int = 200
    class_whitelist: tuple[int, ...] | None = None
    # label shift applied to the forget set for the bias-removal goal
    bias_shift: int = 1


@dataclass(frozen=True)
class UnlearnSection:
    epochs: int = 10
    momentum: float = 0.9
    retain_batch_size: int = 256
    kl_direction: str = KL_TEACHER_STUDENT
    l1_learning_rate: float = 0.01
    on_divergence: str = "truncate"


@dataclass(frozen=True)
class RegionSection:
    enabled: bool = True
    planes: int = 300
    resolution: int = 75
    margin_fraction: float = 0.1
    # null means: pick the smallest candidate reaching the coverage target
    delta: float | None = None
    delta_candidates: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 4.0)
    coverage_target: float = 0.9
    methods: tuple[str, ...] = (SCRUB, NEGGRAD, L1SPARSITY, FINETUNE)


@dataclass(frozen=True)
class MIASection:
    folds: int = 5


def _default_goals() -> dict:
    return {PRIVACY: (0.2, 0.4, 0.6), BIAS: (0.15, 0.3, 0.5)}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    forget: ForgetSection = ForgetSection()
    goals: dict = field(default_factory=_default_goals)
    methods: tuple[str, ...] = (SCRUB, NEGGRAD, L1SPARSITY, FINETUNE)
    # per-method grid overrides; methods absent here use default_grid
    grids: dict = field(default_factory=dict)
    unlearn: UnlearnSection = UnlearnSection()
    regions: RegionSection = RegionSection()
    mia: MIASection = MIASection()
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be a nonempty list of distinct integers")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative")
        if not self.model.width_scales or any(s <= 0 for s in self.model.width_scales):
            raise ConfigError("width_scales must be a nonempty list of positive numbers")
        if len(set(self.model.width_scales)) != len(self.model.width_scales):
            raise ConfigError("width_scales must be distinct")
        for goal, lams in self.goals.items():
            if goal not in (PRIVACY, BIAS):
                raise ConfigError(f"unknown goal {goal!r}")
            if not lams or any(not 0.0 < lam < 1.0 for lam in lams):
                raise ConfigError(f"goal {goal!r} needs lambdas strictly inside (0, 1)")
        if not self.goals:
            raise ConfigError("at least one goal is required")
        for m in self.methods:
            if m not in METHODS or m == RETRAIN:
                raise ConfigError(f"method {m!r} cannot be tuned (choose from scrub, neggrad, l1sparsity, finetune)")
        for m, g in self.grids.items():
            if m not in self.methods:
                raise ConfigError(f"grid given for method {m!r} which is not in the method list")
            if len(HyperGrid.from_dict(g)) == 0:
                raise ConfigError(f"grid for {m!r} is empty")
        if self.unlearn.kl_direction not in (KL_TEACHER_STUDENT, KL_STUDENT_TEACHER):
            raise ConfigError(f"unknown kl_direction {self.unlearn.kl_direction!r}")
        if self.unlearn.on_divergence not in ("raise", "truncate"):
            raise ConfigError("on_divergence must be 'raise' or 'truncate'")
        if self.forget.bias_shift % self.dataset.num_classes == 0 and BIAS in self.goals:
            raise ConfigError("bias_shift must not map a class onto itself")
        if self.regions.delta is not None and self.regions.delta < 0:
            raise ConfigError("delta must be nonnegative")
        if self.regions.delta is None and not self.regions.delta_candidates:
            raise ConfigError("delta_candidates must be nonempty when delta is null")
        if self.mia.folds < 2:
            raise ConfigError("mia folds must be at least 2")

    def grid(self, method: str) -> HyperGrid:
        if method in self.grids:
            return HyperGrid.from_dict(self.grids[method])
        return default_grid(method, self.unlearn.epochs, self.unlearn.l1_learning_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["goals"] = {k: list(v) for k, v in self.goals.items()}
        return {"schema_version": SCHEMA_VERSION, **_lists(d)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        sections = {
            "dataset": DatasetSection,
            "model": ModelSection,
            "train": TrainSection,
            "forget": ForgetSection,
            "unlearn": UnlearnSection,
            "regions": RegionSection,
            "mia": MIASection,
        }
        kwargs = {}
        known = set(sections) | {"goals", "methods", "grids", "seeds", "output_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in sections.items():
            if key in d:
                kwargs[key] = _section(typ, d[key], key)
        if "goals" in d:
            kwargs["goals"] = {k: tuple(float(x) for x in v) for k, v in d["goals"].items()}
        if "methods" in d:
            kwargs["methods"] = tuple(d["methods"])
        if "grids" in d:
            kwargs["grids"] = dict(d["grids"])
        if "seeds" in d:
            kwargs["seeds"] = tuple(int(s) for s in d["seeds"])
        if "output_dir" in d:
            kwargs["output_dir"] = str(d["output_dir"])
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    def with_output_dir(self, path: str | Path) -> "ExperimentConfig":
        return replace(self, output_dir=str(path))


def _section(typ, raw, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    fields = typ.__dataclass_fields__
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    return typ(**vals)


def _lists(o):
    if isinstance(o, dict):
        return {k: _lists(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_lists(v) for v in o]
    return o


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(raw)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
