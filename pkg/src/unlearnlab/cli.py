"""Command-line interface. Every subcommand wraps one library operation."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    CSVFormatError,
    ForgetSpec,
    derive_splits,
    inject_label_bias,
    load_csv,
    partition_forget,
    save_csv,
    shift_rule,
    write_manifest,
)
from .experiment import (
    audit_bundle,
    model_config,
    read_rows,
    run_experiment,
    seed_data,
    train_config,
    unlearn_settings,
    write_rows,
)
from .metrics import BIAS, PRIVACY, REPORT_COLUMNS, GoalSpec, error_report, mia_accuracy, report_row
from .nn import NonFiniteLossError, build_model, forward, train
from .regions import (
    calibrate_delta,
    partition_far_prox,
    plane_predictions,
    sample_planes,
    scores_from_predictions,
    write_plane_dump,
)
from .tuning import TuningData, TuningError, tune_many, write_summary
from .unlearn import FINETUNE, L1SPARSITY, NEGGRAD, SCRUB, HyperGrid, MethodHyperparams, run_method


class CLIError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "output", None) and args.command == "experiment":
        cfg = cfg.with_output_dir(args.output)
    return cfg


def _dataset(args, cfg):
    """Dataset for single-model commands: a CSV if given, else the config's generator at ``--seed``."""
    ds, forget, _ = seed_data(cfg, args.seed)
    if getattr(args, "data", None):
        ds = load_csv(args.data, cfg.dataset.num_classes)
        forget, _ = partition_forget(ds, ForgetSpec(cfg.forget.count, cfg.forget.class_whitelist, args.seed))
    goal = getattr(args, "goal", PRIVACY)
    if goal == BIAS:
        ds = inject_label_bias(ds, forget, shift_rule(ds.num_classes, cfg.forget.bias_shift))
    return ds, forget


def _split(ds, forget):
    retain = np.setdiff1d(ds.indices("train"), forget)
    return retain, derive_splits(ds, forget)


def cmd_gen_data(args, cfg):
    ds, forget, _ = seed_data(cfg, args.seed)
    if args.goal == BIAS:
        ds = inject_label_bias(ds, forget, shift_rule(ds.num_classes, cfg.forget.bias_shift))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(ds, out)
    spec = ForgetSpec(cfg.forget.count, cfg.forget.class_whitelist, args.seed,
                      cfg.forget.bias_shift if args.goal == BIAS else None)
    write_manifest(out.with_suffix(".manifest.json"), ds, forget, spec)
    print(f"wrote {len(ds)} examples to {out} (digest {ds.digest()[:12]})")


def cmd_train(args, cfg):
    ds, forget = _dataset(args, cfg)
    idx = ds.indices("train")
    if args.retain_only:
        idx, _ = _split(ds, forget)
    width = args.width if args.width is not None else cfg.model.width_scales[-1]
    mcfg = model_config(cfg, width, args.seed)
    tcfg = train_config(cfg, args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    w = train(build_model(mcfg), *ds.subset(idx), tcfg)[-1]
    save_checkpoint(args.output, w, tcfg.epochs, {"seed": args.seed, "retain_only": bool(args.retain_only)})
    X, y = ds.subset(idx)
    err = float(np.mean(np.argmax(forward(w, X), axis=1) != y))
    print(f"saved {args.output}: width {width}, {len(w)} parameters, train error {err!r}")


def _hyperparams(args, cfg) -> MethodHyperparams:
    return MethodHyperparams(
        method=args.method,
        alpha=args.alpha,
        gamma=args.gamma,
        learning_rate=args.lr if args.lr is not None else (cfg.unlearn.l1_learning_rate if args.method == L1SPARSITY else 0.01),
        epochs=args.epochs if args.epochs is not None else cfg.unlearn.epochs,
        l1_ratio=args.l1_ratio,
    )


def cmd_unlearn(args, cfg):
    ds, forget = _dataset(args, cfg)
    w0 = load_checkpoint(args.model, ds.dim, ds.num_classes)
    retain, _ = _split(ds, forget)
    hp = _hyperparams(args, cfg)
    traj = run_method(w0, ds.subset(retain), ds.subset(forget), hp, unlearn_settings(cfg, args.seed))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for epoch, w in traj.checkpoints:
        save_checkpoint(out / f"epoch_{epoch:04d}.ckpt", w, epoch, {"method": hp.method})
    manifest = {"hyperparams": hp.to_dict(), "seed": args.seed, "objective": traj.objective,
                "epochs": [e for e, _ in traj.checkpoints]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(traj.checkpoints)} checkpoints to {out}")


def cmd_tune(args, cfg):
    ds, forget = _dataset(args, cfg)
    w0 = load_checkpoint(args.model, ds.dim, ds.num_classes)
    retain, derived = _split(ds, forget)
    data = TuningData(ds.subset(retain), ds.subset(forget), ds.subset(ds.indices("val")), ds.subset(derived.val_forget))
    grid = cfg.grid(args.method)
    if args.epochs is not None:
        d = grid.to_dict()
        d["fixed"]["epochs"] = args.epochs
        grid = HyperGrid.from_dict(d)
    goal = GoalSpec(args.goal, args.lam)
    res = tune_many(grid, w0, data, [goal], unlearn_settings(cfg, args.seed),
                    on_divergence=cfg.unlearn.on_divergence)[0]
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        res.write_table(out / "score_table.csv")
        write_summary(res, out / "best.json")
        save_checkpoint(out / "best.ckpt", res.best_params, res.best_epoch, {"goal": args.goal, "lambda": args.lam})
    print(json.dumps({"best": res.best.to_dict(), "best_epoch": res.best_epoch, "best_score": res.best_score}))


def cmd_eval(args, cfg):
    ds, forget = _dataset(args, cfg)
    _, derived = _split(ds, forget)
    rows = []
    for path in args.models:
        w = load_checkpoint(path, ds.dim, ds.num_classes)
        rep = error_report(w, ds, forget, derived)
        mia = mia_accuracy(w, ds.subset(forget), ds.subset(derived.forget_test), cfg.mia.folds, args.seed).accuracy
        rows.append(report_row(Path(path).stem, w.config.width_scale, args.method, args.lam if args.lam is not None else "",
                               args.goal, rep, mia, args.seed))
    _emit(rows, REPORT_COLUMNS, args.output)


def cmd_mia(args, cfg):
    ds, forget = _dataset(args, cfg)
    _, derived = _split(ds, forget)
    w = load_checkpoint(args.model, ds.dim, ds.num_classes)
    rep = mia_accuracy(w, ds.subset(forget), ds.subset(derived.forget_test), cfg.mia.folds, args.seed)
    print(json.dumps({"accuracy": rep.accuracy, "fold_accuracies": list(rep.fold_accuracies),
                      "members": rep.member_count, "nonmembers": rep.nonmember_count}))


def cmd_regions(args, cfg):
    ds, forget = _dataset(args, cfg)
    f0 = load_checkpoint(args.before, ds.dim, ds.num_classes)
    fu = load_checkpoint(args.after, ds.dim, ds.num_classes)
    r = cfg.regions
    planes, _ = sample_planes(ds, forget, args.planes or r.planes, args.seed, r.resolution, r.margin_fraction)
    forget_inputs = ds.inputs[forget]
    delta = args.delta
    if delta is None:
        delta = r.delta if r.delta is not None else calibrate_delta(planes, forget_inputs, r.delta_candidates, r.coverage_target)
    parts = [partition_far_prox(p, forget_inputs, delta) for p in planes]
    p0, pu = plane_predictions(f0, planes), plane_predictions(fu, planes)
    rep = scores_from_predictions(p0, pu, parts, delta)
    if args.output:
        write_plane_dump(args.output, planes, p0, pu, parts)
    print(json.dumps({k: v for k, v in rep.as_dict().items()}))


def cmd_experiment(args, cfg):
    bundle = run_experiment(cfg, workers=args.workers, progress=(None if args.quiet else _progress))
    print(f"report bundle in {bundle.root}: {len(bundle.results)} result rows, {len(bundle.incomplete)} incomplete cells")
    return 0 if bundle.complete else 3


def cmd_export(args, cfg):
    root = Path(args.bundle)
    src = root / f"{args.table}.csv"
    if not src.exists():
        raise CLIError(f"no {args.table}.csv in {root}")
    rows = read_rows(src)
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = src.read_text()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.audit:
        findings = audit_bundle(root)
        bad = [f for f in findings if not f["ok"]]
        print(f"audited {len(findings)} tuned cells, {len(bad)} mismatches", file=sys.stderr)
        if bad:
            return 4
    return 0


def _emit(rows, columns, output):
    if output:
        write_rows(Path(output), columns, rows)
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
        sys.stdout.write(buf.getvalue())


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnlab", description="Machine unlearning experiments across model widths.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="experiment config (JSON); built-in defaults if omitted")
        p.add_argument("--seed", type=int, default=0, help="data, forget-set and training seed")
        p.set_defaults(func=fn)
        return p

    def data_opts(p):
        p.add_argument("--data", help="dataset CSV (default: generate from the config)")
        p.add_argument("--goal", choices=(PRIVACY, BIAS), default=PRIVACY,
                       help="bias flips the forget labels before use")

    p = add("gen-data", cmd_gen_data, "generate the synthetic dataset as CSV")
    p.add_argument("--goal", choices=(PRIVACY, BIAS), default=PRIVACY)
    p.add_argument("--output", required=True)

    p = add("train", cmd_train, "train an original model (or a retrain oracle with --retain-only)")
    data_opts(p)
    p.add_argument("--width", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--retain-only", action="store_true")
    p.add_argument("--output", required=True)

    methods = (SCRUB, NEGGRAD, L1SPARSITY, FINETUNE)
    p = add("unlearn", cmd_unlearn, "run one unlearning method and save every epoch")
    data_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=methods, required=True)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--l1-ratio", type=float, default=0.0)
    p.add_argument("--output", required=True)

    p = add("tune", cmd_tune, "grid-search one method on validation data")
    data_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=methods, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output")

    p = add("eval", cmd_eval, "error rates and MIA accuracy of checkpoints, as CSV rows")
    data_opts(p)
    p.add_argument("models", nargs="+")
    p.add_argument("--method", default="")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--output")

    p = add("mia", cmd_mia, "membership inference accuracy on the forget set")
    data_opts(p)
    p.add_argument("--model", required=True)

    p = add("regions", cmd_regions, "decision-region similarity and change scores")
    data_opts(p)
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--delta", type=float)
    p.add_argument("--planes", type=int)
    p.add_argument("--output", help="per-plane CSV dump")

    p = add("experiment", cmd_experiment, "full width sweep; writes the report bundle")
    p.add_argument("--output", help="override the config's output_dir")
    p.add_argument("--workers", type=int, help="worker processes (default: $UNLEARNLAB_WORKERS or 1)")
    p.add_argument("--quiet", action="store_true")

    p = add("export", cmd_export, "export a table from a report bundle")
    p.add_argument("bundle")
    p.add_argument("--table", choices=("results", "regions", "summary", "tuning"), default="results")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--audit", action="store_true", help="re-verify every tuned cell's argmin")
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config(args)
        status = args.func(args, cfg)
        return int(status or 0)
    except (ConfigError, CheckpointError, CSVFormatError, CLIError, TuningError, NonFiniteLossError,
            ValueError, OSError) as exc:
        print(f"unlearnlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
