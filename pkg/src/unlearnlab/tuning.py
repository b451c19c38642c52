"""Validation-based hyperparameter selection for an unlearning method."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .metrics import GoalSpec, classification_error
from .nn import NonFiniteLossError, ParamVector
from .unlearn import (
    HyperGrid,
    MethodHyperparams,
    UnlearnSettings,
    UnlearnTrajectory,
    run_method,
)

# methods selected epoch by epoch; the others are judged on their final state
EPOCHWISE = {"scrub", "neggrad", "finetune"}

TABLE_COLUMNS = ("cell", "method", "alpha", "gamma", "learning_rate", "epochs", "l1_ratio", "epoch",
                 "forget_err", "val_err", "val_forget_err", "score")


@dataclass(frozen=True)
class TuningData:
    """Everything tuning may look at. Test data is deliberately absent."""

    retain: tuple[np.ndarray, np.ndarray]
    forget: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    val_forget: tuple[np.ndarray, np.ndarray]


class TuningError(RuntimeError):
    def __init__(self, hp: MethodHyperparams, cause: Exception):
        super().__init__(f"unlearning failed for {hp.to_dict()}: {cause}")
        self.hyperparams = hp
        self.cause = cause


@dataclass
class TuneResult:
    best: MethodHyperparams
    best_epoch: int
    best_score: float
    best_params: ParamVector
    table: list[dict] = field(default_factory=list)

    def write_table(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in self.table:
                writer.writerow({k: _fmt(row[k]) for k in TABLE_COLUMNS})

    def summary(self) -> dict:
        return {"best": self.best.to_dict(), "best_epoch": self.best_epoch, "best_score": self.best_score}


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_table(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out = {}
            for k, v in row.items():
                if k == "method":
                    out[k] = v
                elif k in ("cell", "epoch", "epochs"):
                    out[k] = int(v)
                else:
                    out[k] = float(v)
            rows.append(out)
    return rows


def evaluated_epochs(traj: UnlearnTrajectory) -> list[tuple[int, ParamVector]]:
    if traj.diverged_at is not None and traj.hyperparams.method not in EPOCHWISE:
        return []
    if traj.hyperparams.method in EPOCHWISE:
        return traj.checkpoints[1:]
    return traj.checkpoints[-1:]


def checkpoint_rates(w: ParamVector, data: TuningData) -> dict:
    return {
        "forget_err": classification_error(w, *data.forget),
        "val_err": classification_error(w, *data.val),
        "val_forget_err": classification_error(w, *data.val_forget) if len(data.val_forget[1]) else float("nan"),
    }


def score_checkpoint(w: ParamVector, data: TuningData, goal: GoalSpec) -> dict:
    rates = checkpoint_rates(w, data)
    rates["score"] = goal.score(rates)
    return rates


def argmin_table(table: list[dict]) -> int:
    """Row index of the first minimum; rows are in grid order then epoch order."""
    best = None
    for i, row in enumerate(table):
        if best is None or row["score"] < table[best]["score"]:
            best = i
    if best is None:
        raise ValueError("empty score table")
    return best


def tune(
    grid: HyperGrid,
    w0: ParamVector,
    data: TuningData,
    goal: GoalSpec,
    settings: UnlearnSettings = UnlearnSettings(),
    on_trajectory: Callable[[int, UnlearnTrajectory], None] | None = None,
    on_divergence: str = "raise",
) -> TuneResult:
    """Run every grid cell, score each evaluated epoch on validation data, keep the minimizer.

    Ties go to the earlier grid cell, then to the earlier epoch. With
    ``on_divergence="truncate"`` a run whose objective blows up keeps the
    epochs it finished and the remaining epochs are simply absent from the
    table; with ``"raise"`` the failure propagates as :class:`TuningError`.
    """
    return tune_many(grid, w0, data, [goal], settings, on_trajectory, on_divergence)[0]


def tune_many(
    grid: HyperGrid,
    w0: ParamVector,
    data: TuningData,
    goals: Sequence[GoalSpec],
    settings: UnlearnSettings = UnlearnSettings(),
    on_trajectory: Callable[[int, UnlearnTrajectory], None] | None = None,
    on_divergence: str = "raise",
) -> list[TuneResult]:
    """:func:`tune` for several goals at once, sharing the unlearning runs.

    The trajectories do not depend on the goal, only the scores do, so each
    grid cell is run once and scored under every goal.
    """
    if on_divergence not in ("raise", "truncate"):
        raise ValueError(f"unknown divergence policy {on_divergence!r}")
    if not goals:
        raise ValueError("need at least one goal")
    tables: list[list[dict]] = [[] for _ in goals]
    best_idx: list[int | None] = [None] * len(goals)
    best_params: list[ParamVector | None] = [None] * len(goals)
    for cell, hp in enumerate(grid):
        try:
            traj = run_method(w0, data.retain, data.forget, hp, settings)
        except NonFiniteLossError as exc:
            if on_divergence == "raise":
                raise TuningError(hp, exc) from exc
            traj = UnlearnTrajectory(list(enumerate(exc.checkpoints)), hp, diverged_at=exc.epoch)
        except ValueError as exc:
            raise TuningError(hp, exc) from exc
        if on_trajectory is not None:
            on_trajectory(cell, traj)
        for epoch, w in evaluated_epochs(traj):
            rates = checkpoint_rates(w, data)
            for g, goal in enumerate(goals):
                row = {"cell": cell, **hp.to_dict(), "epoch": epoch, **rates, "score": goal.score(rates)}
                tables[g].append(row)
                if best_idx[g] is None or row["score"] < tables[g][best_idx[g]]["score"]:
                    best_idx[g] = len(tables[g]) - 1
                    best_params[g] = w
    if best_idx[0] is None:
        raise TuningError(next(iter(grid)), RuntimeError("every grid cell diverged"))
    results = []
    for table, i, w in zip(tables, best_idx, best_params):
        row = table[i]
        results.append(TuneResult(MethodHyperparams.from_dict(row), row["epoch"], row["score"], w, table))
    return results


def audit_table(table: list[dict], goal: GoalSpec) -> tuple[int, bool]:
    """Recompute every score from its recorded rates; return the argmin row and whether all scores matched."""
    matched = True
    recomputed = []
    for row in table:
        score = goal.score(row)
        matched &= score == row["score"] or (np.isnan(score) and np.isnan(row["score"]))
        recomputed.append({**row, "score": score})
    return argmin_table(recomputed), bool(matched)


def write_summary(result: TuneResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(result.summary(), indent=2, sort_keys=True))
