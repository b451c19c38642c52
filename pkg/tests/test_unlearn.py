import math

import numpy as np
import pytest

from unlearnlab.nn import ModelConfig, TrainConfig, build_model, cross_entropy, forward, numerical_grad, predict, train
from unlearnlab.unlearn import (
    FINETUNE,
    L1SPARSITY,
    NEGGRAD,
    SCRUB,
    HyperGrid,
    L1Objective,
    MethodHyperparams,
    NegGradObjective,
    ScrubObjective,
    UnlearnSettings,
    default_grid,
    finetune,
    l1_sparsity,
    neggrad,
    retrain_oracle,
    run_method,
    scrub,
)
from unlearnlab.nn import KL_STUDENT_TEACHER, KL_TEACHER_STUDENT


def rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def sets(ds, forget, retain):
    return ds.subset(retain), ds.subset(forget)


def same_trajectory(a, b):
    return len(a.checkpoints) == len(b.checkpoints) and all(
        ea == eb and np.array_equal(wa.values, wb.values) for (ea, wa), (eb, wb) in zip(a.checkpoints, b.checkpoints)
    )


# -- grids -------------------------------------------------------------------------

def test_default_grids_hold_the_reference_values():
    g = dict(default_grid(SCRUB).axes)
    assert g["learning_rate"] == (0.0005, 0.001, 0.005, 0.01)
    assert g["gamma"] == (0.1, 0.5, 0.9, 0.95, 0.99)
    assert g["alpha"] == (0.001, 0.005, 0.01, 0.1, 0.5)
    g = dict(default_grid(NEGGRAD).axes)
    assert g["learning_rate"] == (0.001, 0.01, 0.05, 0.1, 0.5)
    assert g["alpha"] == (0.1, 0.5, 0.9, 0.999, 0.9999)
    g = dict(default_grid(L1SPARSITY).axes)
    assert g["gamma"] == (0.0001, 0.0005, 0.001, 0.005, 0.01)
    assert g["l1_ratio"] == (0.0, 0.1, 0.3, 0.5, 0.8)
    assert len(default_grid(SCRUB)) == 100 and len(default_grid(NEGGRAD)) == 25


def test_grid_enumeration_is_lexicographic():
    grid = HyperGrid(NEGGRAD, (("learning_rate", (0.1, 0.2)), ("alpha", (0.5, 0.9))), (("epochs", 3),))
    cells = [(hp.learning_rate, hp.alpha) for hp in grid]
    assert cells == [(0.1, 0.5), (0.1, 0.9), (0.2, 0.5), (0.2, 0.9)]
    assert all(hp.epochs == 3 for hp in grid)
    assert HyperGrid.from_dict(grid.to_dict()) == grid


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        MethodHyperparams(NEGGRAD, alpha=1.5)
    with pytest.raises(ValueError):
        MethodHyperparams("bogus")
    with pytest.raises(ValueError):
        MethodHyperparams(L1SPARSITY, l1_ratio=2.0)
    with pytest.raises(ValueError):
        HyperGrid(SCRUB, (("alpha", ()),))


# -- degeneracy laws ------------------------------------------------------------------

def test_neggrad_alpha_one_is_finetune(small_problem, trained_small):
    ds, forget, retain = small_problem
    r, f = sets(ds, forget, retain)
    s = UnlearnSettings(seed=4, retain_batch_size=8)
    a = neggrad(trained_small, r, f, MethodHyperparams(NEGGRAD, alpha=1.0, learning_rate=0.05, epochs=4), s)
    b = finetune(trained_small, r, MethodHyperparams(FINETUNE, learning_rate=0.05, epochs=4), s)
    assert same_trajectory(a, b)


def test_l1_gamma_zero_is_finetune(small_problem, trained_small):
    ds, forget, retain = small_problem
    r, _ = sets(ds, forget, retain)
    s = UnlearnSettings(seed=4, retain_batch_size=8)
    a = l1_sparsity(trained_small, r, MethodHyperparams(L1SPARSITY, gamma=0.0, l1_ratio=0.5, learning_rate=0.05, epochs=4), s)
    b = finetune(trained_small, r, MethodHyperparams(FINETUNE, learning_rate=0.05, epochs=4), s)
    assert same_trajectory(a, b)


@pytest.mark.parametrize(
    "hp",
    [
        MethodHyperparams(SCRUB, alpha=0.5, gamma=0.9, learning_rate=0.0, epochs=3),
        MethodHyperparams(NEGGRAD, alpha=0.5, learning_rate=0.0, epochs=3),
        MethodHyperparams(L1SPARSITY, gamma=0.01, l1_ratio=0.5, learning_rate=0.0, epochs=3),
        MethodHyperparams(FINETUNE, learning_rate=0.0, epochs=3),
    ],
    ids=lambda hp: hp.method,
)
def test_zero_learning_rate_is_identity(small_problem, trained_small, hp):
    ds, forget, retain = small_problem
    r, f = sets(ds, forget, retain)
    traj = run_method(trained_small, r, f, hp, UnlearnSettings(retain_batch_size=8))
    assert [e for e, _ in traj.checkpoints] == [0, 1, 2, 3]
    for _, w in traj.checkpoints:
        assert np.array_equal(w.values, trained_small.values)


def test_trajectories_are_seed_deterministic(small_problem, trained_small):
    ds, forget, retain = small_problem
    r, f = sets(ds, forget, retain)
    hp = MethodHyperparams(SCRUB, alpha=0.1, gamma=0.5, learning_rate=0.01, epochs=3)
    s = UnlearnSettings(seed=1, retain_batch_size=8)
    assert same_trajectory(scrub(trained_small, r, f, hp, s), scrub(trained_small, r, f, hp, s))


# -- objective gradients -----------------------------------------------------------------

def _probe(objective, w, X, y, rng, n):
    _, g = objective(w, X, y)
    coords = rng.choice(len(w), size=n, replace=False)
    num = numerical_grad(lambda v: objective(w.with_values(v), X, y, need_grad=False)[0], w.values, 1e-6, coords)
    return rel_err(g[coords], num[coords])


def _instances(rng, count=4):
    for trial in range(count):
        cfg = ModelConfig(5, 3, (8, 6), 1.0, seed=trial)
        w = build_model(cfg)
        teacher = w.with_values(w.values + 0.3 * rng.standard_normal(len(w)))
        student = w.with_values(w.values + 0.3 * rng.standard_normal(len(w)))
        X = rng.standard_normal((10, 5))
        y = rng.integers(0, 3, 10)
        Xf = rng.standard_normal((6, 5))
        yf = rng.integers(0, 3, 6)
        yield teacher, student, X, y, Xf, yf


@pytest.mark.parametrize("direction", [KL_TEACHER_STUDENT, KL_STUDENT_TEACHER])
def test_scrub_objective_gradient(rng, direction):
    errs = []
    for teacher, student, X, y, Xf, _ in _instances(rng):
        obj = ScrubObjective(teacher, Xf, alpha=0.3, gamma=0.7, direction=direction)
        errs.append(_probe(obj, student, X, y, rng, 30))
    errs = np.concatenate(errs)
    assert len(errs) >= 100 and errs.max() < 1e-4


def test_neggrad_objective_gradient(rng):
    errs = []
    for _, student, X, y, Xf, yf in _instances(rng):
        errs.append(_probe(NegGradObjective(Xf, yf, 0.6), student, X, y, rng, 30))
    errs = np.concatenate(errs)
    assert len(errs) >= 100 and errs.max() < 1e-4


def test_l1_objective_gradient(rng):
    errs = []
    for _, student, X, y, _, _ in _instances(rng):
        errs.append(_probe(L1Objective(0.01), student, X, y, rng, 30))
    errs = np.concatenate(errs)
    assert len(errs) >= 100 and errs.max() < 1e-4


def test_scrub_objective_value_formula(rng):
    from unlearnlab.nn import kl_divergence

    teacher, student, X, y, Xf, _ = next(_instances(rng, 1))
    obj = ScrubObjective(teacher, Xf, alpha=0.3, gamma=0.7)
    value, _ = obj(student, X, y, need_grad=False)
    expected = (
        0.3 * kl_divergence(forward(teacher, X), forward(student, X)).mean()
        + 0.7 * cross_entropy(forward(student, X), y).mean()
        - kl_divergence(forward(teacher, Xf), forward(student, Xf)).mean()
    )
    assert math.isclose(value, expected, rel_tol=1e-12)


def test_l1_subgradient_uses_sign_zero_at_zero():
    w = build_model(ModelConfig(2, 2, (2,), seed=0))
    w = w.with_values(np.zeros(len(w)))
    X = np.zeros((1, 2))
    _, g_pen = L1Objective(1.0)(w, X, np.array([0]))
    _, g_ce = L1Objective(0.0)(w, X, np.array([0]))
    assert np.array_equal(g_pen, g_ce)


# -- behaviour on small instances ------------------------------------------------------------

def test_scrub_objective_decreases_on_twenty_examples():
    from unlearnlab.data import ForgetSpec, gen_gaussian_clusters, partition_forget

    ds = gen_gaussian_clusters(2, 4, {"train": 10, "val": 0, "test": 0}, 3.0, 1.0, seed=0)
    forget, retain = partition_forget(ds, ForgetSpec(4, seed=0))
    w0 = train(build_model(ModelConfig(4, 2, (16,), seed=0)), *ds.subset(ds.indices("train")), TrainConfig(0.05, 0.9, 30, 8))[-1]
    hp = MethodHyperparams(SCRUB, alpha=0.5, gamma=0.9, learning_rate=0.01, epochs=5)
    traj = scrub(w0, ds.subset(retain), ds.subset(forget), hp, UnlearnSettings(retain_batch_size=256))
    assert traj.objective[5] < traj.objective[0]


def test_neggrad_raises_a_fit_forget_loss(small_problem, trained_small):
    ds, forget, retain = small_problem
    Xf, yf = ds.subset(forget)
    fit = np.flatnonzero(predict(trained_small, Xf) == yf)
    assert len(fit)
    i = fit[0]
    hp = MethodHyperparams(NEGGRAD, alpha=0.5, learning_rate=0.01, epochs=3)
    traj = neggrad(trained_small, ds.subset(retain), (Xf, yf), hp, UnlearnSettings(retain_batch_size=256))
    losses = [cross_entropy(forward(w, Xf[i]), yf[i]) for _, w in traj.checkpoints]
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_l1_phase_one_shrinks_the_norm(small_problem, trained_small):
    ds, forget, retain = small_problem
    hp = MethodHyperparams(L1SPARSITY, gamma=0.01, l1_ratio=0.5, learning_rate=0.01, epochs=4)
    traj = l1_sparsity(trained_small, ds.subset(retain), hp, UnlearnSettings(retain_batch_size=8))
    penalty_end = math.ceil(0.5 * 4)
    norm = lambda w: float(np.abs(w.values).sum())
    assert norm(traj.at(penalty_end)) < norm(traj.at(0))


def test_l1_phase_boundary_is_exact(small_problem, trained_small):
    ds, forget, retain = small_problem
    s = UnlearnSettings(retain_batch_size=8, seed=2)
    # after the penalised phase the trajectory continues as finetuning from that state
    hp = MethodHyperparams(L1SPARSITY, gamma=0.01, l1_ratio=0.3, learning_rate=0.01, epochs=5)
    traj = l1_sparsity(trained_small, ds.subset(retain), hp, s)
    k = math.ceil(0.3 * 5)
    penal_only = l1_sparsity(trained_small, ds.subset(retain), MethodHyperparams(L1SPARSITY, gamma=0.01, l1_ratio=1.0, learning_rate=0.01, epochs=k), s)
    assert np.array_equal(traj.at(k).values, penal_only.final.values)


def test_finetune_retain_error_non_increasing(small_problem, trained_small):
    ds, forget, retain = small_problem
    Xr, yr = ds.subset(retain)
    traj = finetune(trained_small, (Xr, yr), MethodHyperparams(FINETUNE, learning_rate=0.01, epochs=5), UnlearnSettings(retain_batch_size=8))
    errs = [np.mean(predict(w, Xr) != yr) for _, w in traj.checkpoints]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_retrain_oracle_fits_retain_and_is_deterministic(small_problem):
    ds, forget, retain = small_problem
    cfg = ModelConfig(ds.dim, ds.num_classes, (32, 32), 1.0, seed=1)
    tcfg = TrainConfig(0.05, 0.9, 150, 16, seed=1)
    a = retrain_oracle(ds.subset(retain), cfg, tcfg)
    b = retrain_oracle(ds.subset(retain), cfg, tcfg)
    assert np.array_equal(a.values, b.values)
    Xr, yr = ds.subset(retain)
    assert np.all(predict(a, Xr) == yr)


def test_methods_reject_empty_sets(trained_small):
    empty = (np.zeros((0, 5)), np.zeros(0, dtype=int))
    hp = MethodHyperparams(SCRUB, alpha=0.1, gamma=0.1, epochs=1)
    some = (np.zeros((3, 5)), np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        scrub(trained_small, some, empty, hp)
    with pytest.raises(ValueError):
        finetune(trained_small, empty, MethodHyperparams(FINETUNE, epochs=1))
