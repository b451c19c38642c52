"""Acceptance checks on the default configuration.

Each test prints one ``criterion N: PASS|FAIL`` line. The trend checks
(5-8, 10) share one full default experiment; the determinism check runs a
second one. Expect roughly half an hour on one CPU.
"""

import math
import time

import numpy as np
import pytest

from unlearnlab.config import ExperimentConfig
from unlearnlab.experiment import audit_bundle, goal_data, run_experiment, train_original
from unlearnlab.metrics import bias_score, classification_error, privacy_score
from unlearnlab.nn import (
    KL_STUDENT_TEACHER,
    KL_TEACHER_STUDENT,
    ModelConfig,
    build_model,
    loss_and_grad,
    numerical_grad,
    predict,
)
from unlearnlab.regions import build_plane, partition_far_prox, region_report, scores_from_predictions
from unlearnlab.unlearn import (
    FINETUNE,
    L1SPARSITY,
    NEGGRAD,
    SCRUB,
    L1Objective,
    MethodHyperparams,
    NegGradObjective,
    ScrubObjective,
    UnlearnSettings,
    run_method,
)

pytestmark = pytest.mark.acceptance

WIDE, NARROW = 1.0, 0.05
SEEDS = (0, 1, 2, 3)


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("default") / "run"
    started = time.perf_counter()
    b = run_experiment(ExperimentConfig().with_output_dir(root))
    b.elapsed = time.perf_counter() - started
    return b


def rows_by(rows, **match):
    keys = {k: str(v) for k, v in match.items()}
    return [r for r in rows if all(str(r[k]) == v for k, v in keys.items())]


def one(rows, **match):
    (r,) = rows_by(rows, **match)
    return r


# -- 1: gradients ----------------------------------------------------------------------

def rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_c1_gradient_suite(capsys):
    rng = np.random.default_rng(7)
    started = time.perf_counter()
    worst = {}
    for trial in range(4):
        cfg = ModelConfig(5, 3, (8, 6), 1.0, seed=trial)
        w = build_model(cfg)
        teacher = w.with_values(w.values + 0.3 * rng.standard_normal(len(w)))
        student = w.with_values(w.values + 0.3 * rng.standard_normal(len(w)))
        X, y = rng.standard_normal((10, 5)), rng.integers(0, 3, 10)
        Xf, yf = rng.standard_normal((6, 5)), rng.integers(0, 3, 6)
        objectives = {
            "ce": lambda v, need_grad=True: loss_and_grad(student.with_values(v), X, y),
            "scrub-ts": ScrubObjective(teacher, Xf, alpha=0.3, gamma=0.7, direction=KL_TEACHER_STUDENT),
            "scrub-st": ScrubObjective(teacher, Xf, alpha=0.3, gamma=0.7, direction=KL_STUDENT_TEACHER),
            "neggrad": NegGradObjective(Xf, yf, 0.6),
            "l1": L1Objective(0.01),
        }
        for name, obj in objectives.items():
            if name == "ce":
                f = lambda v: obj(v)[0]
                g = obj(student.values)[1]
            else:
                f = lambda v, obj=obj: obj(student.with_values(v), X, y, need_grad=False)[0]
                g = obj(student, X, y)[1]
            coords = rng.choice(len(student), size=30, replace=False)
            num = numerical_grad(f, student.values, 1e-6, coords)
            worst.setdefault(name, []).extend(rel_err(g[coords], num[coords]).tolist())
    elapsed = time.perf_counter() - started
    ok = all(len(v) >= 100 and max(v) < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max rel {max(v):.1e} ({len(v)} probes)" for k, v in worst.items())
    verdict(capsys, 1, ok, f"{detail}; {elapsed:.1f}s")


# -- 2: formula oracles ----------------------------------------------------------------

def brute_forward_argmax(w, x):
    """Loop-based forward pass; independent of the vectorized layout."""
    layers = w.layers()
    h = [float(v) for v in x]
    for depth, (W, b) in enumerate(layers):
        h = [float(b[j]) + sum(h[i] * float(W[i, j]) for i in range(len(h))) for j in range(len(b))]
        if depth < len(layers) - 1:
            h = [max(v, 0.0) for v in h]
    # first maximal logit wins ties
    return max(range(len(h)), key=lambda j: (h[j], -j))


def test_c2_formula_oracles(capsys):
    rng = np.random.default_rng(11)
    trials = 200
    mismatches = {k: 0 for k in ("error", "privacy", "bias", "far", "similarity", "change")}
    for t in range(trials):
        d, k, n = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 11))
        w = build_model(ModelConfig(d, k, (int(rng.integers(1, 6)),), 1.0, seed=t))
        w = w.with_values(w.values + rng.standard_normal(len(w)))
        X, y = rng.standard_normal((n, d)), rng.integers(0, k, n)
        wrong = sum(brute_forward_argmax(w, X[i]) != y[i] for i in range(n))
        if classification_error(w, X, y) != wrong / n:
            mismatches["error"] += 1

        # three error rates from brute-force counts, then the two goal scores
        counts = [int(rng.integers(0, 11)) for _ in range(3)]
        sizes = [int(rng.integers(max(c, 1), 11)) for c in counts]
        ef, evf, ev = (c / s for c, s in zip(counts, sizes))
        lam = float(rng.uniform(0.01, 0.99))
        if privacy_score(ef, evf, ev, lam) != lam * (ef - evf if ef >= evf else evf - ef) + (1 - lam) * ev:
            mismatches["privacy"] += 1
        if bias_score(ef, ev, lam) != (-lam) * ef + (1 - lam) * ev:
            mismatches["bias"] += 1

        # regions: up to 5 planes on a 5x5 grid, up to 10 forget examples
        nf = int(rng.integers(1, 11))
        F = rng.standard_normal((nf, d)) * 1.5
        delta = float(rng.uniform(0.0, 2.0))
        planes, parts, brute_far = [], [], []
        for j in range(int(rng.integers(1, 6))):
            a = F[rng.integers(nf)]
            p = build_plane(a, a + rng.standard_normal(d) * 2, a + rng.standard_normal(d) * 2, 0.1, 5, j)
            planes.append(p)
            parts.append(partition_far_prox(p, F, delta))
            brute_far.append({i for i, s in enumerate(p.samples) if all(math.dist(s, f) > delta for f in F)})
            got = parts[-1]
            if set(got.far.tolist()) != brute_far[-1] or sorted(got.far.tolist() + got.prox.tolist()) != list(range(len(p))):
                mismatches["far"] += 1
        f0 = build_model(ModelConfig(d, k, (4,), 1.0, seed=1000 + t))
        fu = f0.with_values(f0.values + 0.5 * rng.standard_normal(len(f0)))
        p0 = [predict(f0, p.samples) for p in planes]
        pu = [predict(fu, p.samples) for p in planes]
        sims, chgs = [], []
        for a, b, far, p in zip(p0, pu, brute_far, planes):
            same = [a[i] == b[i] for i in range(len(p)) if i in far]
            diff = [a[i] != b[i] for i in range(len(p)) if i not in far]
            if same:
                sims.append(sum(same) / len(same))
            if diff:
                chgs.append(sum(diff) / len(diff))
        try:
            rep = scores_from_predictions(p0, pu, parts, delta)
        except ValueError:
            rep = None
        if not sims or not chgs:
            # a score with no usable plane must be refused, not invented
            mismatches["similarity"] += rep is not None
            continue
        if rep.similarity != sum(sims) / len(sims):
            mismatches["similarity"] += 1
        if rep.change != sum(chgs) / len(chgs):
            mismatches["change"] += 1
    ok = not any(mismatches.values())
    verdict(capsys, 2, ok, f"{trials} trials each, mismatches {mismatches}")


# -- 3: degeneracy laws ----------------------------------------------------------------

def test_c3_degeneracy_laws(capsys, small_problem, trained_small):
    ds, forget, retain = small_problem
    r, f = ds.subset(retain), ds.subset(forget)
    s = UnlearnSettings(seed=4, retain_batch_size=8)

    def same(a, b):
        return len(a.checkpoints) == len(b.checkpoints) and all(
            ea == eb and np.array_equal(wa.values, wb.values) for (ea, wa), (eb, wb) in zip(a.checkpoints, b.checkpoints)
        )

    ft = run_method(trained_small, r, f, MethodHyperparams(FINETUNE, learning_rate=0.05, epochs=4), s)
    laws = {
        "neggrad(alpha=1)=finetune": same(
            run_method(trained_small, r, f, MethodHyperparams(NEGGRAD, alpha=1.0, learning_rate=0.05, epochs=4), s), ft),
        "l1(gamma=0)=finetune": same(
            run_method(trained_small, r, f, MethodHyperparams(L1SPARSITY, gamma=0.0, l1_ratio=0.5, learning_rate=0.05, epochs=4), s), ft),
    }
    frozen = True
    for hp in (
        MethodHyperparams(SCRUB, alpha=0.5, gamma=0.9, learning_rate=0.0, epochs=3),
        MethodHyperparams(NEGGRAD, alpha=0.5, learning_rate=0.0, epochs=3),
        MethodHyperparams(L1SPARSITY, gamma=0.01, l1_ratio=0.5, learning_rate=0.0, epochs=3),
        MethodHyperparams(FINETUNE, learning_rate=0.0, epochs=3),
    ):
        traj = run_method(trained_small, r, f, hp, s)
        frozen &= all(np.array_equal(w.values, trained_small.values) for _, w in traj.checkpoints)
    laws["lr=0 identity"] = frozen
    rep = region_report(trained_small, trained_small, ds, forget, m=5, delta=0.5, seed=0, resolution=8)
    laws["S_far(f,f)=1"] = rep.similarity == 1.0
    laws["C_prox(f,f)=0"] = rep.change == 0.0
    rng = np.random.default_rng(0)
    all_far = True
    for j in range(20):
        a = ds.inputs[forget[j % len(forget)]]
        p = build_plane(a, a + rng.standard_normal(ds.dim), a + rng.standard_normal(ds.dim), 0.1, 9, j)
        part = partition_far_prox(p, ds.inputs[forget], 0.0)
        # the forget anchor sits exactly on the plane origin, distance 0, so it alone is not far
        others = [i for i in range(len(p)) if not np.array_equal(p.samples[i], a)]
        all_far &= set(part.far.tolist()) >= set(others) and len(part.prox) == len(p) - len(others)
    laws["delta=0 all-far"] = all_far
    verdict(capsys, 3, all(laws.values()), ", ".join(f"{k}: {'ok' if v else 'broken'}" for k, v in laws.items()))


# -- 4: overparameterized fit ----------------------------------------------------------

def test_c4_overparameterized_fit(capsys):
    cfg = ExperimentConfig()
    started = time.perf_counter()
    errs = {}
    for seed in SEEDS:
        gd = goal_data(cfg, seed)["privacy"]
        X, y = gd.dataset.subset(gd.dataset.indices("train"))
        for width in (WIDE, NARROW):
            errs[(width, seed)] = classification_error(train_original(cfg, gd, width, seed), X, y)
    elapsed = time.perf_counter() - started
    ok = all(errs[(WIDE, s)] == 0.0 and errs[(NARROW, s)] > 0.0 for s in SEEDS) and elapsed < 600
    detail = "; ".join(f"seed {s}: wide {errs[(WIDE, s)]:.3f} narrow {errs[(NARROW, s)]:.3f}" for s in SEEDS)
    verdict(capsys, 4, ok, f"{detail}; {elapsed:.0f}s")


# -- 5-8: trends on the default experiment ---------------------------------------------

def test_c5_insight_overparameterized_privacy(capsys, bundle):
    rows = bundle.results
    notes, ok = [], True
    for method in (SCRUB, NEGGRAD):
        wins = 0
        for s in SEEDS:
            pair = {}
            for width in (WIDE, NARROW):
                r = one(rows, method=method, goal="privacy", seed=s, width_scale=width, **{"lambda": 0.4})
                pair[width] = (float(r["test_err"]), abs(float(r["forget_err"]) - float(r["forget_test_err"])))
            (a, b), (c, d) = pair[WIDE], pair[NARROW]
            wins += a <= c and b <= d and (c - a >= 0.03 or d - b >= 0.03)
            notes.append(f"{method} s{s} wide ({a:.3f},{b:.3f}) narrow ({c:.3f},{d:.3f})")
        ok &= wins >= 3
        notes.append(f"{method} dominates in {wins}/4")
    verdict(capsys, 5, ok, "; ".join(notes))


def test_c6_insight_forget_set_needed_for_bias(capsys, bundle):
    rows = bundle.results
    wins, notes = 0, []
    for s in SEEDS:
        fe = {m: float(one(rows, method=m, goal="bias", seed=s, width_scale=WIDE, **{"lambda": 0.3})["forget_err"])
              for m in (SCRUB, NEGGRAD, L1SPARSITY)}
        good = fe[SCRUB] >= 0.5 and fe[NEGGRAD] >= 0.5 and fe[L1SPARSITY] <= min(fe[SCRUB], fe[NEGGRAD]) - 0.2
        wins += good
        notes.append(f"s{s} scrub {fe[SCRUB]:.3f} neggrad {fe[NEGGRAD]:.3f} l1 {fe[L1SPARSITY]:.3f}")
    verdict(capsys, 6, wins >= 3, f"{wins}/4 seeds; " + "; ".join(notes))


def test_c7_mia_calibration(capsys, bundle):
    rows = bundle.results
    mean = lambda method, lam="": float(np.mean([
        float(one(rows, method=method, goal="privacy", seed=s, width_scale=WIDE, **{"lambda": lam})["mia_acc"]) for s in SEEDS
    ]))
    oracle = mean("retrain")
    original = mean("original")
    ok = abs(oracle - 0.5) <= 0.1
    notes = [f"retrain mean {oracle:.3f}", f"original mean {original:.3f}"]
    gap = abs(original - 0.5)
    for method in (SCRUB, NEGGRAD):
        moved = (gap - abs(mean(method, 0.4) - 0.5)) / gap if gap > 0 else 1.0
        ok &= moved >= 0.4
        notes.append(f"{method} mean {mean(method, 0.4):.3f} moves {100 * moved:.0f}% toward 0.5")
    verdict(capsys, 7, ok, "; ".join(notes))


def test_c8_region_locality(capsys, bundle):
    rows = bundle.regions
    wins, notes = 0, []
    for s in SEEDS:
        r = {w: one(rows, method=SCRUB, goal="bias", seed=s, width_scale=w, **{"lambda": 0.3}) for w in (WIDE, NARROW)}
        c = {w: float(r[w]["change"]) for w in r}
        sf = {w: float(r[w]["similarity"]) for w in r}
        wins += c[WIDE] >= c[NARROW] and sf[WIDE] >= sf[NARROW]
        notes.append(f"s{s} C_prox {c[WIDE]:.3f}/{c[NARROW]:.3f} S_far {sf[WIDE]:.3f}/{sf[NARROW]:.3f}"
                     f" (delta {r[WIDE]['delta']}, planes {r[WIDE]['planes_used']})")
    verdict(capsys, 8, wins >= 3, f"{wins}/4 seeds wide>=narrow on both; " + "; ".join(notes))


# -- 9, 10: determinism and audit -------------------------------------------------------

def test_c9_determinism(capsys, bundle, tmp_path_factory):
    root2 = tmp_path_factory.mktemp("default") / "again"
    b2 = run_experiment(ExperimentConfig().with_output_dir(root2))
    a_files = sorted(p.relative_to(bundle.root) for p in bundle.root.rglob("*.csv"))
    b_files = sorted(p.relative_to(b2.root) for p in b2.root.rglob("*.csv"))
    differing = [str(p) for p in a_files if (bundle.root / p).read_bytes() != (b2.root / p).read_bytes()] if a_files == b_files else ["file sets differ"]
    ok = a_files == b_files and not differing and bundle.complete and b2.complete
    verdict(capsys, 9, ok, f"{len(a_files)} CSV files compared, {len(differing)} differ; first run {bundle.elapsed:.0f}s")


def test_c10_tuning_audit(capsys, bundle):
    findings = audit_bundle(bundle.root)
    bad = [f for f in findings if not f["ok"]]
    expected = 3 * 4 * 4 * 6  # widths x seeds x methods x (3 privacy + 3 bias lambdas)
    ok = len(findings) == expected and not bad and bundle.complete
    verdict(capsys, 10, ok, f"{len(findings)} tuned cells audited (expected {expected}), {len(bad)} mismatches")
