import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcrfcast.evaluation import (
    EvaluationError,
    ModelMonthOutput,
    build_report,
    coverage95,
    min_nlpd,
    nlpd,
    nlpd_terms,
    rmse,
)
from gcrfcast.predictors import VARIANCE_FLOOR


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([3, 4], [0, 0]) == pytest.approx(3.5355, abs=1e-4)
    assert rmse([1, 2, 3], [1.5, 2.5, 3.5]) == pytest.approx(0.5)


def test_nlpd_at_optimal_variance():
    r = 0.7
    assert nlpd([0.0], [r * r], [r]) == pytest.approx(0.5 * (1 + np.log(r * r)))


@given(st.floats(1e-3, 1e3))
@settings(max_examples=50, deadline=None)
def test_stated_form_minimum_at_squared_residual(r):
    s2 = r * r * np.exp(np.linspace(-3, 3, 601))
    vals = nlpd_terms(np.zeros_like(s2), s2, np.full_like(s2, r))
    assert abs(s2[np.argmin(vals)] / (r * r) - 1) < 0.011


def test_displayed_form_minimum():
    r = 1.3
    s2 = r * r * np.exp(np.linspace(-3, 3, 601))
    vals = nlpd_terms(np.zeros_like(s2), s2, np.full_like(s2, r), form="displayed")
    assert s2[np.argmin(vals)] == pytest.approx(r * r / 2, rel=0.011)


def test_nlpd_rejects_nonpositive_variance():
    with pytest.raises(EvaluationError, match="positive"):
        nlpd([0.0], [0.0], [1.0])
    with pytest.raises(EvaluationError):
        nlpd([0.0], [1.0], [1.0], form="other")


def test_min_nlpd_examples():
    assert min_nlpd([0.0, 0.0], [1.0, -1.0]) == pytest.approx(0.5)
    assert min_nlpd([1.0], [1.0]) == pytest.approx(0.5 * np.log(VARIANCE_FLOOR))


def test_min_nlpd_lower_bound(rng):
    p = rng.standard_normal(20)
    t = p + rng.standard_normal(20)
    floor = min_nlpd(p, t)
    for _ in range(100):
        assert floor <= nlpd(p, np.exp(rng.uniform(-5, 3, 20)), t) + 1e-12


def test_coverage_examples(rng):
    t = rng.standard_normal(100)
    assert coverage95(np.zeros(100), np.full(100, 1e6), t) == 1.0
    assert coverage95(np.zeros(100), np.full(100, 1e-8), t + 1.0) == 0.0
    mean = rng.standard_normal(10000)
    var = rng.uniform(0.1, 3.0, 10000)
    truth = mean + np.sqrt(var) * rng.standard_normal(10000)
    assert 0.93 <= coverage95(mean, var, truth) <= 0.97


def test_input_checks():
    with pytest.raises(EvaluationError, match="equal lengths"):
        rmse([1, 2], [1])
    with pytest.raises(EvaluationError, match="nonempty"):
        rmse([], [])


def test_single_model_single_month():
    out = {"m": {0: ModelMonthOutput(np.array([1.0, 2.0]), np.array([0.5, 0.5]))}}
    rep = build_report(out, {0: np.array([1.5, 2.0])})
    assert rep.averages["m"] == rep.per_month["m"][0]
    assert set(rep.averages["m"]) == {"rmse", "nlpd", "coverage95", "min_nlpd"}


def test_averages_are_month_means():
    truths = {1: np.zeros(2), 2: np.zeros(2)}
    out = {"a": {1: np.array([1.0, 1.0]), 2: np.array([3.0, 3.0])}}
    rep = build_report(out, truths)
    assert rep.averages["a"]["rmse"] == pytest.approx(2.0)
    assert "nlpd" not in rep.averages["a"]


def test_ties_broken_by_name():
    truths = {0: np.zeros(3)}
    same = np.array([0.1, 0.2, 0.3])
    rep = build_report({"zeta": {0: same}, "alpha": {0: same.copy()}}, truths)
    assert rep.ranking["rmse"] == ["alpha", "zeta"]
    assert rep.marks("rmse") == {"alpha": "best", "zeta": "second"}


def test_month_mismatch_rejected():
    with pytest.raises(EvaluationError, match="month mismatch"):
        build_report({"a": {0: np.zeros(2)}}, {0: np.zeros(2), 1: np.zeros(2)})


def test_coverage_ranked_by_distance_to_nominal():
    t = {0: np.zeros(20)}
    mean = np.zeros(20)
    mean[0] = 5.0
    rep = build_report({
        "over": {0: (mean, np.full(20, 1e6))},  # coverage 1.0
        "near": {0: (mean, np.full(20, 1.0))},  # coverage 0.95
    }, t)
    assert rep.ranking["coverage95"][0] == "near"


def test_emitters(rng):
    truths = {m: rng.standard_normal(3) for m in (5, 6)}
    out = {name: {m: ModelMonthOutput(rng.standard_normal(3), rng.uniform(0.1, 1, 3)) for m in truths}
           for name in ("A", "B")}
    rep = build_report(out, truths, node_ids=["x", "y", "z"])
    doc = json.loads(rep.to_json())
    assert doc["format_version"] == 1
    assert len(doc["records"]) == 2 * (2 * 4 + 4)
    table = rep.table("rmse").splitlines()
    assert table[0] == "# format-version 1"
    assert table[1].split(",") == ["rmse", "average", "5", "6", "rank"]
    nodes = rep.node_nlpd_table("A").splitlines()[2:]
    obtained = [float(r.split(",")[2]) for r in nodes]
    assert obtained == sorted(obtained, reverse=True)
    assert rep.to_json() == build_report(out, truths, node_ids=["x", "y", "z"]).to_json()
