import numpy as np
import pytest

from unlearnlab.data import ForgetSpec, gen_gaussian_clusters, partition_forget
from unlearnlab.nn import ModelConfig, TrainConfig, build_model, train


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_problem():
    """A 4-class, 5-dim problem small enough for exhaustive checks."""
    ds = gen_gaussian_clusters(4, 5, {"train": 15, "val": 5, "test": 10}, mean_radius=3.0, noise_sigma=0.8, seed=3)
    forget, retain = partition_forget(ds, ForgetSpec(10, seed=3))
    return ds, forget, retain


@pytest.fixture(scope="session")
def trained_small(small_problem):
    ds, forget, retain = small_problem
    cfg = ModelConfig(ds.dim, ds.num_classes, (24, 24), 1.0, seed=5)
    X, y = ds.subset(ds.indices("train"))
    w0 = train(build_model(cfg), X, y, TrainConfig(0.05, 0.9, 150, 16, seed=5))[-1]
    return w0


def tiny_config_dict(output_dir):
    """A full-pipeline config that runs in a few seconds."""
    from unlearnlab.config import ExperimentConfig

    raw = ExperimentConfig().to_dict()
    raw["dataset"].update(num_classes=3, dim=4, train_per_class=12, val_per_class=6, test_per_class=8)
    raw["model"] = {"base_widths": [16, 16], "width_scales": [0.25, 1.0]}
    raw["train"].update(epochs=20, learning_rate=0.05)
    raw["forget"].update(count=6)
    raw["goals"] = {"privacy": [0.4], "bias": [0.3]}
    raw["grids"] = {
        "scrub": {"method": "scrub", "axes": {"learning_rate": [0.01], "alpha": [0.1, 0.5]}, "fixed": {"gamma": 0.9, "epochs": 2}},
        "neggrad": {"method": "neggrad", "axes": {"learning_rate": [0.01, 0.1], "alpha": [0.9]}, "fixed": {"epochs": 2}},
        "l1sparsity": {"method": "l1sparsity", "axes": {"gamma": [0.001], "l1_ratio": [0.5]}, "fixed": {"learning_rate": 0.01, "epochs": 2}},
        "finetune": {"method": "finetune", "axes": {"learning_rate": [0.01]}, "fixed": {"epochs": 2}},
    }
    raw["unlearn"].update(epochs=2, retain_batch_size=16)
    raw["regions"].update(planes=4, resolution=5)
    raw["mia"] = {"folds": 2}
    raw["seeds"] = [0, 1]
    raw["output_dir"] = str(output_dir)
    return raw


@pytest.fixture
def tiny_config(tmp_path):
    import json

    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict(tmp_path / "out")))
    return path
