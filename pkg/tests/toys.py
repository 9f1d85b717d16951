"""Small models and datasets shared by the test modules."""

from functools import lru_cache

import numpy as np

from superfit.data import make_blobs
from superfit.models import Linear, Model, build_middlecnn, build_tinymlp
from superfit.training import TrainConfig, train, train_distill

# desk-scale setup: 2-class Gaussian blobs in 2048 dims, TinyMLP(256)
DESK = dict(n=3000, num_classes=2, dim=2048, seed=0, cluster_std=1.0, center_box=(-0.3, 0.3))
DESK_HIDDEN = 256
DESK_ITERATIONS = 500


def linear_model(dim: int, num_classes: int, seed: int = 0, dtype=np.float64) -> Model:
    rng = np.random.default_rng(seed)
    layer = Linear(dim, num_classes, rng, dtype=dtype)
    layer.bias.data = rng.standard_normal(num_classes).astype(dtype)
    return Model([("fc", layer)], num_classes, (dim,), "linear")


def saturated_mlp(dim: int, num_classes: int, offset: float = 1000.0, seed: int = 0,
                  dtype=np.float32) -> Model:
    """TinyMLP whose output bias puts every non-zero class ``offset`` below class 0.

    The weights stay random and nonzero, so input gradients of any logit
    combination are nonzero; only the CE gradient underflows.
    """
    model = build_tinymlp(dim, 8, num_classes, seed=seed, dtype=dtype)
    bias = np.full(num_classes, -offset, dtype=dtype)
    bias[0] = 0
    model.named_parameters()["fc2.bias"].data = bias
    return model


def random_case(seed: int):
    """A random (model, x, y, epsilon) tuple for attack property tests."""
    rng = np.random.default_rng([seed, 99])
    k = int(rng.integers(2, 5))
    if seed % 25 == 0:
        model = build_middlecnn(1, 8, k, channels=(2, 2, 2), hidden=4, seed=seed)
        x = rng.uniform(0, 1, (3, 1, 8, 8))
    else:
        d = int(rng.integers(2, 12))
        model = build_tinymlp(d, int(rng.integers(2, 10)), k, seed=seed)
        x = rng.uniform(0, 1, (4, d))
    # pin some pixels to the box edges so clipping is exercised
    x[rng.uniform(size=x.shape) < 0.1] = 0.0
    x[rng.uniform(size=x.shape) < 0.1] = 1.0
    y = rng.integers(0, k, len(x))
    epsilon = float(rng.choice([0.0, 1 / 255, 8 / 255, 0.1, 0.5, 1.0]))
    return model, x.astype(np.float32), y, epsilon


@lru_cache(maxsize=None)
def desk_data():
    data = make_blobs(**DESK)
    return data.split(1 / 3, seed=0)


@lru_cache(maxsize=None)
def desk_model(objective: str, seed: int = 0):
    """Train (once per session) a desk-scale model with the given objective."""
    train_split, _ = desk_data()
    model = build_tinymlp(DESK["dim"], DESK_HIDDEN, DESK["num_classes"], seed=seed)
    cfg = TrainConfig(objective=objective, max_iterations=DESK_ITERATIONS, seed=seed)
    model, log = train(model, train_split, cfg)
    return model, log


@lru_cache(maxsize=None)
def desk_distilled(temperature: float = 100.0, seed: int = 0):
    train_split, _ = desk_data()
    dim, k = DESK["dim"], DESK["num_classes"]
    teacher = build_tinymlp(dim, DESK_HIDDEN, k, seed=seed + 1)
    student = build_tinymlp(dim, DESK_HIDDEN, k, seed=seed + 2)
    cfg = TrainConfig(max_iterations=DESK_ITERATIONS, seed=seed)
    return train_distill(teacher, student, train_split, temperature, cfg), teacher
