"""Width-sweep experiment: train, unlearn, tune, evaluate, write the report bundle.

Work units are (width_scale, seed) pairs. Each unit writes its own cell
directories and returns rows; the parent writes the aggregate CSVs in a fixed
order, so the output does not depend on the worker count or completion order.
"""

from __future__ import annotations

import csv
import json
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import ExperimentConfig, save_config
from .data import (
    DerivedSplits,
    ForgetSpec,
    LabeledDataset,
    derive_splits,
    gen_gaussian_clusters,
    inject_label_bias,
    partition_forget,
    shift_rule,
)
from .metrics import BIAS, PRIVACY, REPORT_COLUMNS, GoalSpec, error_report, mia_accuracy, report_row
from .nn import ModelConfig, NonFiniteLossError, ParamVector, TrainConfig, build_model, train
from .regions import (
    RegionReport,
    calibrate_delta,
    partition_far_prox,
    plane_predictions,
    sample_planes,
    scores_from_predictions,
)
from .tuning import TuningData, TuningError, audit_table, read_table, tune_many, write_summary
from .unlearn import RETRAIN, UnlearnSettings, retrain_oracle

WORKERS_ENV = "UNLEARNLAB_WORKERS"

REGION_COLUMNS = (
    "model_id",
    "width_scale",
    "method",
    "lambda",
    "goal",
    "seed",
    "delta",
    "similarity",
    "change",
    "planes_used",
    "planes_skipped_far",
    "planes_skipped_prox",
)

TUNING_COLUMNS = (
    "model_id",
    "width_scale",
    "method",
    "lambda",
    "goal",
    "seed",
    "alpha",
    "gamma",
    "learning_rate",
    "epochs",
    "l1_ratio",
    "best_epoch",
    "best_score",
)

SUMMARY_KEYS = ("width_scale", "method", "lambda", "goal")
SUMMARY_VALUES = ("test_err", "forget_err", "forget_test_err", "val_err", "val_forget_err", "mia_acc")


@dataclass
class UnitResult:
    width_scale: float
    seed: int
    rows: list[dict] = field(default_factory=list)
    region_rows: list[dict] = field(default_factory=list)
    tuning_rows: list[dict] = field(default_factory=list)
    incomplete: list[dict] = field(default_factory=list)
    deltas: dict = field(default_factory=dict)


@dataclass
class ReportBundle:
    root: Path
    results: list[dict]
    regions: list[dict]
    tuning: list[dict]
    summary: list[dict]
    incomplete: list[dict]

    @property
    def complete(self) -> bool:
        return not self.incomplete


def fmt_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_rows(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt_value(row.get(c, "")) for c in columns])


def read_rows(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def width_dir(width: float) -> str:
    return f"w{width!r}"


def goal_dir(goal: str, lam: float) -> str:
    return f"{goal}-{lam!r}"


def model_id(width: float, seed: int, goal: str, method: str, lam=None) -> str:
    base = f"{width_dir(width)}-s{seed}-{goal}-{method}"
    return base if lam is None else f"{base}-l{lam!r}"


# -- per-seed data ------------------------------------------------------------------

@dataclass(frozen=True)
class GoalData:
    goal: str
    dataset: LabeledDataset
    forget: np.ndarray
    retain: np.ndarray
    derived: DerivedSplits

    def tuning_data(self) -> TuningData:
        ds = self.dataset
        return TuningData(
            retain=ds.subset(self.retain),
            forget=ds.subset(self.forget),
            val=ds.subset(ds.indices("val")),
            val_forget=ds.subset(self.derived.val_forget),
        )


def seed_data(config: ExperimentConfig, seed: int) -> tuple[LabeledDataset, np.ndarray, np.ndarray]:
    d = config.dataset
    ds = gen_gaussian_clusters(d.num_classes, d.dim, d.counts(), d.mean_radius, d.noise_sigma, seed)
    spec = ForgetSpec(config.forget.count, config.forget.class_whitelist, seed)
    forget, retain = partition_forget(ds, spec)
    return ds, forget, retain


def goal_data(config: ExperimentConfig, seed: int) -> dict[str, GoalData]:
    ds, forget, retain = seed_data(config, seed)
    out = {}
    for goal in config.goals:
        gds = ds
        if goal == BIAS:
            gds = inject_label_bias(ds, forget, shift_rule(ds.num_classes, config.forget.bias_shift))
        out[goal] = GoalData(goal, gds, forget, retain, derive_splits(gds, forget))
    return out


def train_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    t = config.train
    return TrainConfig(t.learning_rate, t.momentum, t.epochs, t.batch_size, seed)


def model_config(config: ExperimentConfig, width: float, seed: int) -> ModelConfig:
    d = config.dataset
    return ModelConfig(d.dim, d.num_classes, tuple(config.model.base_widths), width, seed)


def train_original(config: ExperimentConfig, gd: GoalData, width: float, seed: int) -> ParamVector:
    X, y = gd.dataset.subset(gd.dataset.indices("train"))
    return train(build_model(model_config(config, width, seed)), X, y, train_config(config, seed))[-1]


def unlearn_settings(config: ExperimentConfig, seed: int) -> UnlearnSettings:
    u = config.unlearn
    return UnlearnSettings(seed, u.momentum, u.retain_batch_size, u.kl_direction)


# -- region analysis (labels are irrelevant, so planes are shared by all goals) --

class RegionContext:
    def __init__(self, config: ExperimentConfig, ds: LabeledDataset, forget: np.ndarray, seed: int):
        r = config.regions
        self.planes, self.redraws = sample_planes(ds, forget, r.planes, seed, r.resolution, r.margin_fraction)
        forget_inputs = ds.inputs[forget]
        if r.delta is None:
            self.delta = calibrate_delta(self.planes, forget_inputs, r.delta_candidates, r.coverage_target)
        else:
            self.delta = float(r.delta)
        self.partitions = [partition_far_prox(p, forget_inputs, self.delta) for p in self.planes]
        self._before: dict[int, list[np.ndarray]] = {}

    def report(self, f0: ParamVector, fu: ParamVector) -> RegionReport:
        key = id(f0)
        if key not in self._before:
            self._before = {key: plane_predictions(f0, self.planes)}
        return scores_from_predictions(self._before[key], plane_predictions(fu, self.planes), self.partitions, self.delta)


def region_row(mid, width, method, lam, goal, seed, rep: RegionReport) -> dict:
    return {
        "model_id": mid,
        "width_scale": width,
        "method": method,
        "lambda": lam,
        "goal": goal,
        "seed": seed,
        "delta": rep.delta,
        "similarity": rep.similarity,
        "change": rep.change,
        "planes_used": rep.planes_used,
        "planes_skipped_far": rep.planes_skipped_far,
        "planes_skipped_prox": rep.planes_skipped_prox,
    }


# -- one work unit ------------------------------------------------------------------

def _mia(config, w, gd: GoalData, seed):
    ds = gd.dataset
    if len(gd.derived.forget_test) < config.mia.folds or len(gd.forget) < config.mia.folds:
        return None
    return mia_accuracy(w, ds.subset(gd.forget), ds.subset(gd.derived.forget_test), config.mia.folds, seed).accuracy


def run_unit(config: ExperimentConfig, width: float, seed: int) -> UnitResult:
    """Everything for one (width_scale, seed): originals, oracles, every tuned cell."""
    out = UnitResult(width, seed)
    root = Path(config.output_dir) / width_dir(width) / f"s{seed}"
    goals = goal_data(config, seed)
    any_gd = next(iter(goals.values()))
    regions = None
    if config.regions.enabled:
        regions = RegionContext(config, any_gd.dataset, any_gd.forget, seed)
        out.deltas[seed] = regions.delta
    settings = unlearn_settings(config, seed)
    for goal, gd in goals.items():
        lams = tuple(config.goals[goal])
        try:
            w0 = train_original(config, gd, width, seed)
            w_ret = retrain_oracle(gd.dataset.subset(gd.retain), model_config(config, width, seed), train_config(config, seed))
        except (NonFiniteLossError, ValueError) as exc:
            for method in config.methods:
                for lam in lams:
                    out.incomplete.append(_incomplete(width, seed, goal, lam, method, exc))
            continue
        goal_root = root / goal
        save_checkpoint(goal_root / "original.ckpt", w0, config.train.epochs, {"goal": goal, "seed": seed})
        save_checkpoint(goal_root / "retrain.ckpt", w_ret, config.train.epochs, {"goal": goal, "seed": seed})
        for name, w in (("original", w0), (RETRAIN, w_ret)):
            mid = model_id(width, seed, goal, name)
            out.rows.append(report_row(mid, width, name, "", goal, error_report(w, gd.dataset, gd.forget, gd.derived), _mia(config, w, gd, seed), seed))
            if regions is not None and name == RETRAIN:
                out.region_rows.append(region_row(mid, width, name, "", goal, seed, regions.report(w0, w)))
        data = gd.tuning_data()
        specs = [GoalSpec(goal, lam) for lam in lams]
        for method in config.methods:
            try:
                results = tune_many(config.grid(method), w0, data, specs, settings, on_divergence=config.unlearn.on_divergence)
            except TuningError as exc:
                for lam in lams:
                    out.incomplete.append(_incomplete(width, seed, goal, lam, method, exc))
                continue
            for spec, res in zip(specs, results):
                lam = spec.lam
                mid = model_id(width, seed, goal, method, lam)
                cell = root / goal_dir(goal, lam) / method
                cell.mkdir(parents=True, exist_ok=True)
                res.write_table(cell / "score_table.csv")
                write_summary(res, cell / "best.json")
                save_checkpoint(cell / "best.ckpt", res.best_params, res.best_epoch, {"model_id": mid})
                rep = error_report(res.best_params, gd.dataset, gd.forget, gd.derived)
                row = report_row(mid, width, method, lam, goal, rep, _mia(config, res.best_params, gd, seed), seed)
                out.rows.append(row)
                write_rows(cell / "report.csv", REPORT_COLUMNS, [row])
                out.tuning_rows.append(
                    {
                        "model_id": mid,
                        "width_scale": width,
                        "method": method,
                        "lambda": lam,
                        "goal": goal,
                        "seed": seed,
                        **{k: v for k, v in res.best.to_dict().items() if k != "method"},
                        "best_epoch": res.best_epoch,
                        "best_score": res.best_score,
                    }
                )
                manifest = {
                    "model_id": mid,
                    "width_scale": width,
                    "seed": seed,
                    "goal": goal,
                    "lambda": lam,
                    "method": method,
                    "grid": config.grid(method).to_dict(),
                    "best": res.summary(),
                    "table_rows": len(res.table),
                }
                if regions is not None and method in config.regions.methods:
                    rrep = regions.report(w0, res.best_params)
                    out.region_rows.append(region_row(mid, width, method, lam, goal, seed, rrep))
                    manifest["regions"] = {k: v for k, v in rrep.as_dict().items()}
                (cell / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _incomplete(width, seed, goal, lam, method, exc) -> dict:
    return {
        "width_scale": width,
        "seed": seed,
        "goal": goal,
        "lambda": lam,
        "method": method,
        "error": f"{type(exc).__name__}: {exc}",
    }


def _run_unit_safe(config: ExperimentConfig, width: float, seed: int) -> UnitResult:
    try:
        return run_unit(config, width, seed)
    except Exception as exc:  # a crashed unit is recorded, the sweep goes on
        res = UnitResult(width, seed)
        res.incomplete.append(
            {"width_scale": width, "seed": seed, "goal": "*", "lambda": "*", "method": "*",
             "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
        )
        return res


# -- aggregation -------------------------------------------------------------------

def summarize(rows: list[dict]) -> list[dict]:
    """Seed means per (width, method, lambda, goal), groups in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in SUMMARY_KEYS), []).append(row)
    out = []
    for key, members in groups.items():
        agg = dict(zip(SUMMARY_KEYS, key))
        for col in SUMMARY_VALUES:
            vals = [float(m[col]) for m in members if m[col] != "" and m[col] is not None]
            vals = [v for v in vals if not math.isnan(v)]
            agg[col] = float(np.mean(vals)) if vals else ""
        agg["seeds"] = len(members)
        out.append(agg)
    return out


def worker_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def run_experiment(config: ExperimentConfig, workers: int | None = None, progress=None) -> ReportBundle:
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    save_config(config, root / "config.json")
    units = [(w, s) for w in config.model.width_scales for s in config.seeds]
    n = worker_count(workers)
    results: dict[tuple, UnitResult] = {}
    if n == 1:
        for w, s in units:
            results[(w, s)] = _run_unit_safe(config, w, s)
            if progress:
                progress(f"finished width {w} seed {s}")
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            futures = {pool.submit(_run_unit_safe, config, w, s): (w, s) for w, s in units}
            for fut, key in futures.items():
                results[key] = fut.result()
                if progress:
                    progress(f"finished width {key[0]} seed {key[1]}")
    ordered = [results[u] for u in units]
    rows = [r for u in ordered for r in u.rows]
    region_rows = [r for u in ordered for r in u.region_rows]
    tuning_rows = [r for u in ordered for r in u.tuning_rows]
    incomplete = [r for u in ordered for r in u.incomplete]
    summary = summarize(rows)
    write_rows(root / "results.csv", REPORT_COLUMNS, rows)
    write_rows(root / "regions.csv", REGION_COLUMNS, region_rows)
    write_rows(root / "tuning.csv", TUNING_COLUMNS, tuning_rows)
    write_rows(root / "summary.csv", SUMMARY_KEYS + SUMMARY_VALUES + ("seeds",), summary)
    deltas = {}
    for u in ordered:
        deltas.update(u.deltas)
    manifest = {
        "units": [{"width_scale": w, "seed": s} for w, s in units],
        "original_models": len(units) * len(config.goals),
        "region_delta_by_seed": {str(k): v for k, v in sorted(deltas.items())},
        "incomplete": [{k: v for k, v in r.items() if k != "traceback"} for r in incomplete],
        "complete": not incomplete,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if incomplete:
        with (root / "errors.log").open("w") as fh:
            for r in incomplete:
                fh.write(json.dumps({k: v for k, v in r.items()}, sort_keys=True) + "\n")
    return ReportBundle(root, rows, region_rows, tuning_rows, summary, incomplete)


def audit_bundle(root: str | Path) -> list[dict]:
    """Recompute every persisted score table and compare its argmin with the recorded winner."""
    findings = []
    for best_path in sorted(Path(root).rglob("best.json")):
        cell = best_path.parent
        manifest = json.loads((cell / "manifest.json").read_text())
        recorded = json.loads(best_path.read_text())
        table = read_table(cell / "score_table.csv")
        spec = GoalSpec(manifest["goal"], manifest["lambda"])
        idx, matched = audit_table(table, spec)
        row = table[idx]
        best = recorded["best"]
        agrees = (
            matched
            and row["epoch"] == recorded["best_epoch"]
            and row["score"] == recorded["best_score"]
            and all(row[k] == best[k] for k in ("alpha", "gamma", "learning_rate", "epochs", "l1_ratio"))
        )
        findings.append({"cell": str(cell), "ok": bool(agrees), "rows": len(table)})
    return findings
