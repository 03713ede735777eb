import numpy as np
import pytest

from cbdr.dataset import Dataset
from cbdr.simulation import ScenarioSpec, generate


def make_dataset(n=300, seed=0, q=True, ps="lin", outcome="lin"):
    spec = ScenarioSpec(ps, outcome, reps=1)
    ds = generate(spec, n, seed)
    if not q:
        ds = Dataset(ds.x, ds.a, ds.y)
    return ds


@pytest.fixture
def sim_data():
    return make_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
