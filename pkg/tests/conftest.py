import math

import numpy as np
import pytest

from multicell import model


def random_discrete_law(rng: np.random.Generator, max_stages: int = 6,
                        max_realizations: int = 8) -> model.DiscreteSessionLaw:
    """A random valid DiscreteSessionLaw for property tests."""
    n = int(rng.integers(1, max_stages + 1))
    raw = rng.random(n) + 1e-3
    probs = raw / raw.sum()
    realizations = []
    for k in range(1, n + 1):
        m = int(rng.integers(1, max_realizations + 1))
        w = rng.random(m) + 1e-3
        w = w / w.sum()
        per_k = tuple(
            (float(w[i]), tuple(float(t) for t in rng.uniform(0.1, 50.0, size=k)))
            for i in range(m)
        )
        realizations.append(per_k)
    return model.DiscreteSessionLaw(tuple(float(p) for p in probs), tuple(realizations))


def single_cell_spec(rate: float, hold: float) -> model.NetworkSpec:
    """One cell, one single-stage route with deterministic holding time."""
    law = model.DiscreteSessionLaw((1.0,), (((1.0, (hold,)),),))
    return model.NetworkSpec(1, (model.RouteSpec(model.Route((1,)), rate, law),))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
