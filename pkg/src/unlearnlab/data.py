"""Datasets, splits and the forget/retain partition.

Labels are stored 0-based internally; CSV files use 1-based labels.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    split_tags: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        tags = np.asarray(self.split_tags, dtype=object)
        if X.ndim != 2 or len(X) != len(y) or len(y) != len(tags):
            raise ValueError("inputs, labels and split tags must have matching lengths")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")
        bad = set(tags.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "split_tags", tags)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split_tags == split)

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.inputs[idx], self.labels[idx]

    def with_labels(self, labels: np.ndarray, **provenance) -> "LabeledDataset":
        return LabeledDataset(
            self.inputs, labels, self.split_tags, self.num_classes, {**self.provenance, **provenance}
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.tobytes())
        h.update(self.labels.tobytes())
        h.update("".join(self.split_tags.tolist()).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class ForgetSpec:
    count: int = 200
    class_whitelist: tuple[int, ...] | None = None
    seed: int = 0
    # shift applied to forget labels (label -> label + bias_shift mod C); None disables flipping
    bias_shift: int | None = None

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "class_whitelist": None if self.class_whitelist is None else list(self.class_whitelist),
            "seed": self.seed,
            "bias_shift": self.bias_shift,
        }


@dataclass(frozen=True)
class DerivedSplits:
    forget_test: np.ndarray
    val_forget: np.ndarray


def gen_gaussian_clusters(
    num_classes: int = 10,
    dim: int = 20,
    per_class_counts: Mapping[str, int] | None = None,
    mean_radius: float = 3.0,
    noise_sigma: float = 1.0,
    seed: int = 0,
) -> LabeledDataset:
    """Isotropic Gaussian blobs, one per class, with means on a sphere.

    Examples are emitted split by split (train, val, test) and class by class
    within each split, so counts per split are exact.
    """
    counts = {"train": 100, "val": 20, "test": 100, **(per_class_counts or {})}
    if dim < 2:
        raise ValueError("dim must be at least 2")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if noise_sigma < 0 or any(c < 0 for c in counts.values()):
        raise ValueError("counts and noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dim))
    means = mean_radius * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    xs, ys, tags = [], [], []
    for split in SPLITS:
        n = counts.get(split, 0)
        for c in range(num_classes):
            xs.append(means[c] + noise_sigma * rng.standard_normal((n, dim)))
            ys.append(np.full(n, c))
            tags.extend([split] * n)
    provenance = {
        "generator": "gaussian_clusters",
        "num_classes": num_classes,
        "dim": dim,
        "per_class_counts": counts,
        "mean_radius": mean_radius,
        "noise_sigma": noise_sigma,
        "seed": seed,
    }
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), np.array(tags, dtype=object), num_classes, provenance)


def partition_forget(dataset: LabeledDataset, spec: ForgetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``spec.count`` training indices uniformly without replacement.

    Returns sorted ``(forget, retain)`` index arrays that partition the train split.
    """
    train = dataset.indices("train")
    eligible = train
    if spec.class_whitelist is not None:
        eligible = train[np.isin(dataset.labels[train], list(spec.class_whitelist))]
    if spec.count < 0 or spec.count > len(eligible):
        raise ValueError(f"cannot draw {spec.count} forget examples from {len(eligible)} eligible")
    rng = np.random.default_rng(spec.seed)
    forget = np.sort(rng.choice(eligible, size=spec.count, replace=False)) if spec.count else np.array([], dtype=np.int64)
    retain = np.setdiff1d(train, forget)
    return forget.astype(np.int64), retain.astype(np.int64)


def shift_rule(num_classes: int, shift: int) -> np.ndarray:
    """Label map ``c -> (c + shift) mod C`` as a lookup array."""
    if shift % num_classes == 0:
        raise ValueError("shift maps every class to itself")
    return (np.arange(num_classes) + shift) % num_classes


def inject_label_bias(dataset: LabeledDataset, forget: np.ndarray, rule: Sequence[int] | np.ndarray) -> LabeledDataset:
    """Relabel exactly the ``forget`` examples through ``rule[old_label]``."""
    rule = np.asarray(rule, dtype=np.int64)
    if rule.shape != (dataset.num_classes,):
        raise ValueError("rule must give one target per class")
    if np.any(rule == np.arange(dataset.num_classes)):
        raise ValueError(f"rule maps class {int(np.flatnonzero(rule == np.arange(len(rule)))[0]) + 1} to itself")
    labels = dataset.labels.copy()
    forget = np.asarray(forget, dtype=np.int64)
    labels[forget] = rule[labels[forget]]
    return dataset.with_labels(labels, bias_rule=rule.tolist())


def invert_rule(rule: np.ndarray) -> np.ndarray:
    rule = np.asarray(rule)
    inv = np.empty_like(rule)
    inv[rule] = np.arange(len(rule))
    return inv


def derive_splits(dataset: LabeledDataset, forget: np.ndarray) -> DerivedSplits:
    """Test and validation examples whose class occurs among the forget labels."""
    forget = np.asarray(forget, dtype=np.int64)
    if len(forget) and not np.all(dataset.split_tags[forget] == "train"):
        raise ValueError("forget indices must belong to the train split")
    classes = np.unique(dataset.labels[forget])
    test = dataset.indices("test")
    val = dataset.indices("val")
    return DerivedSplits(
        forget_test=test[np.isin(dataset.labels[test], classes)],
        val_forget=val[np.isin(dataset.labels[val], classes)],
    )


# -- CSV ---------------------------------------------------------------------

class CSVFormatError(ValueError):
    pass


def save_csv(dataset: LabeledDataset, path: str | Path, include_split: bool = True) -> None:
    """Write a header row, a 1-based ``label`` column and ``repr``-precision features."""
    path = Path(path)
    names = [f"x{i}" for i in range(dataset.dim)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", *(["split"] if include_split else []), *names])
        for x, y, tag in zip(dataset.inputs, dataset.labels, dataset.split_tags):
            writer.writerow([int(y) + 1, *([tag] if include_split else []), *(repr(float(v)) for v in x)])


def load_csv(
    path: str | Path,
    num_classes: int | None = None,
    label_column: str = "label",
    split_column: str | None = "split",
    feature_columns: Sequence[str] | None = None,
    default_split: str = "train",
) -> LabeledDataset:
    """Parse a labeled CSV file.

    Labels must be integers in ``1..num_classes`` (``num_classes`` defaults to
    the largest label seen). Rows without a split column go to ``default_split``.
    """
    path = Path(path)
    raw = path.read_bytes()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise CSVFormatError(f"{path}: missing label column {label_column!r}")
        has_split = split_column is not None and split_column in header
        if feature_columns is None:
            feature_columns = [h for h in header if h != label_column and not (has_split and h == split_column)]
        missing = [c for c in feature_columns if c not in header]
        if missing:
            raise CSVFormatError(f"{path}: missing feature columns {missing}")
        li = header.index(label_column)
        si = header.index(split_column) if has_split else None
        fi = [header.index(c) for c in feature_columns]
        xs, ys, tags = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                label = int(row[li])
            except ValueError:
                raise CSVFormatError(f"{path}: line {lineno}: label {row[li]!r} is not an integer") from None
            try:
                xs.append([float(row[i]) for i in fi])
            except ValueError as exc:
                raise CSVFormatError(f"{path}: line {lineno}: non-numeric feature ({exc})") from None
            if not np.all(np.isfinite(xs[-1])):
                raise CSVFormatError(f"{path}: line {lineno}: non-finite feature")
            ys.append(label)
            tag = row[si] if si is not None else default_split
            if tag not in SPLITS:
                raise CSVFormatError(f"{path}: line {lineno}: unknown split {tag!r}")
            tags.append(tag)
    if not ys:
        raise CSVFormatError(f"{path}: no data rows")
    C = num_classes if num_classes is not None else max(ys)
    for lineno, label in enumerate(ys, start=2):
        if not 1 <= label <= C:
            raise CSVFormatError(f"{path}: line {lineno}: label {label} outside 1..{C}")
    return LabeledDataset(
        np.array(xs, dtype=np.float64).reshape(len(ys), len(fi)),
        np.array(ys) - 1,
        np.array(tags, dtype=object),
        C,
        {"source": str(path), "sha256": hashlib.sha256(raw).hexdigest()},
    )


def write_manifest(path: str | Path, dataset: LabeledDataset, forget: np.ndarray | None = None, spec: ForgetSpec | None = None) -> None:
    manifest = {
        "provenance": dataset.provenance,
        "digest": dataset.digest(),
        "split_sizes": {s: int(len(dataset.indices(s))) for s in SPLITS},
        "num_classes": dataset.num_classes,
    }
    if forget is not None:
        manifest["forget_indices"] = [int(i) for i in forget]
    if spec is not None:
        manifest["forget_spec"] = spec.to_dict()
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
