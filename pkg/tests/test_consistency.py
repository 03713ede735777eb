"""Bias shrinks with sample size when at least one working model is right.

Runs 600 replicates of rule search and evaluation; set ``CBDR_SLOW=1`` to enable.
"""

import os

import pytest

from cbdr.design import X
from cbdr.simulation import SIMULATION_SEARCH, ScenarioSpec, run_scenario
from cbdr.value import ALL_KINDS, EstimatorOptions

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("CBDR_SLOW") != "1", reason="set CBDR_SLOW=1 for the consistency trend"),
]


@pytest.mark.parametrize("code", ["cc", "ci", "ic"])
def test_bias_shrinks_with_n(code):
    bias = {}
    for n in (500, 4000):
        spec = ScenarioSpec.from_code(code, n_train=n, n_test=n, reps=100, seed=31)
        res = run_scenario(spec, ALL_KINDS, (X,), SIMULATION_SEARCH, EstimatorOptions())
        bias[n] = {row.estimator_kind: abs(row.bias) for row in res.rows}
    for kind in bias[500]:
        assert bias[4000][kind] < bias[500][kind], (kind, bias)
