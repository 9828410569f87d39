import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raas.core import (
    Action,
    BaselineHazard,
    CustomerArrival,
    CustomerDistribution,
    FinancialParams,
    GroundTruth,
    Grid,
    LearningConfig,
    RobotCondition,
    SolverConfig,
    ValidationError,
    config_from_dict,
    config_to_dict,
    context_vector,
    degradation_vector,
    dot,
    utility_vector,
)

from conftest import THETA_TRUE, U_TRUE


def test_dot_examples():
    assert dot(U_TRUE, [0, 0, 0, 1]) == pytest.approx(0.71, abs=1e-15)
    assert dot([0.3, 0.9], [0.0, 0.0]) == 0.0
    assert dot(THETA_TRUE, np.ones(4)) == pytest.approx(1.4, abs=1e-15)


def test_dot_dimension_mismatch():
    with pytest.raises(ValueError):
        dot([1.0, 2.0], [1.0])


@pytest.mark.parametrize("bad", [[-0.1, 0.0], [1.0, 0.1], [np.nan, 0.0], []])
def test_context_vector_rejects(bad):
    with pytest.raises(ValidationError):
        context_vector(bad)


def test_norm_slack_accepts_boundary():
    v = np.ones(3) / np.sqrt(3)
    context_vector(v * (1 + 5e-13))
    utility_vector(v)
    with pytest.raises(ValidationError):
        utility_vector(v * (1 + 1e-9))


def test_degradation_vector_max_norm():
    degradation_vector([1.0, 0.0, 0.5])
    with pytest.raises(ValidationError):
        degradation_vector([1.01, 0.0])
    with pytest.raises(ValidationError):
        degradation_vector([0.5, -0.1])


def test_customer_and_condition_validation():
    CustomerArrival(np.array([0.1, 0.2]), 1.0, 2.0)
    for T, tau in [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)]:
        with pytest.raises(ValidationError):
            CustomerArrival(np.array([0.1, 0.2]), T, tau)
    with pytest.raises(ValidationError):
        RobotCondition(np.zeros(2), -1.0)
    with pytest.raises(ValidationError):
        RobotCondition(np.array([-1.0, 0.0]), 0.0)


def test_condition_after_rental_accumulates():
    c = RobotCondition.new(2).after_rental([0.1, 0.2], 3.0).after_rental([0.3, 0.0], 2.0)
    np.testing.assert_allclose(c.X, [0.4, 0.2])
    assert c.t_age == 5.0
    assert RobotCondition.new(2).is_new and not c.is_new


def test_financial_and_config_validation():
    with pytest.raises(ValidationError):
        FinancialParams(h=-0.1)
    with pytest.raises(ValidationError):
        LearningConfig(eps0=1.5)
    with pytest.raises(ValidationError):
        LearningConfig(decay=0.0)
    with pytest.raises(ValidationError):
        LearningConfig(K=0)
    with pytest.raises(ValidationError):
        SolverConfig(gamma=1.0)
    with pytest.raises(ValidationError):
        SolverConfig(gamma=0.0)
    SolverConfig(gamma=0.0, discounting="epoch")
    with pytest.raises(ValidationError):
        SolverConfig(discounting="daily")
    with pytest.raises(ValidationError):
        Grid(0.0, 1.0, 1)
    with pytest.raises(ValidationError):
        Grid(1.0, 1.0, 5)
    with pytest.raises(ValidationError):
        CustomerDistribution(mean_T=0.0)
    with pytest.raises(ValidationError):
        GroundTruth(U_TRUE, THETA_TRUE[:3], BaselineHazard.constant(0.001))


def test_baseline_validation():
    with pytest.raises(ValidationError):
        BaselineHazard.constant(-1.0)
    with pytest.raises(ValidationError):
        BaselineHazard.table([0.0, 1.0], [0.1, -0.1])
    with pytest.raises(ValidationError):
        BaselineHazard.table([1.0, 0.0], [0.1, 0.1])
    with pytest.raises(ValidationError):
        BaselineHazard(rate=0.1, ages=[0.0, 1.0], rates=[0.1, 0.1])


def test_baseline_cumulative_forms():
    assert BaselineHazard.constant(0.001).cumulative(10.0) == pytest.approx(0.01)
    tab = BaselineHazard.table([0.0, 100.0], [0.002, 0.002])
    assert tab.cumulative(30.0) - tab.cumulative(10.0) == pytest.approx(0.04, abs=1e-12)
    ramp = BaselineHazard.table([0.0, 2.0], [0.0, 2.0])
    assert ramp.cumulative(1.0) == pytest.approx(0.5)
    # beyond the table the end rate is held
    assert ramp.cumulative(3.0) == pytest.approx(2.0 + 2.0)


@settings(max_examples=50, deadline=None)
@given(
    rates=st.lists(st.floats(0.0, 5.0), min_size=2, max_size=6),
    t=st.lists(st.floats(0.0, 20.0), min_size=2, max_size=10),
)
def test_tabulated_cumulative_nondecreasing_from_zero(rates, t):
    ages = np.linspace(0.0, 10.0, len(rates))
    b = BaselineHazard.table(ages, rates)
    t = np.sort(np.array(t))
    assert b.cumulative(0.0) == 0.0
    assert np.all(np.diff(b.cumulative(t)) >= -1e-12)
    assert np.all(b.rate_at(t) >= 0)


def test_grid_locate_clamps():
    g = Grid(0.0, 8.0, 33)
    i, f = g.locate(np.array([-1.0, 0.0, 4.1, 8.0, 9.0]))
    np.testing.assert_array_equal(i, [0, 0, 16, 31, 31])
    np.testing.assert_allclose(f, [0.0, 0.0, 0.4, 1.0, 1.0], atol=1e-12)
    assert g.refined().n == 65


@pytest.mark.parametrize(
    "cls, obj",
    [
        (LearningConfig, LearningConfig(K=50, burn_in=10)),
        (SolverConfig, SolverConfig(gamma=0.99, c_deg=Grid(0.0, 6.0, 13))),
        (FinancialParams, FinancialParams(h=0.1, F=2.0, R=3.0)),
        (CustomerDistribution, CustomerDistribution(d=3, mean_tau=2.0)),
    ],
)
def test_config_round_trip(cls, obj):
    data = json.loads(json.dumps(config_to_dict(obj)))
    assert config_from_dict(cls, data, "cfg") == obj


def test_truth_round_trip(truth):
    back = GroundTruth.from_dict(json.loads(json.dumps(truth.to_dict())))
    np.testing.assert_array_equal(back.u, truth.u)
    np.testing.assert_array_equal(back.theta, truth.theta)
    assert back.baseline == truth.baseline
    tab = BaselineHazard.table([0.0, 1.0, 3.0], [0.1, 0.2, 0.0])
    back = BaselineHazard.from_dict(json.loads(json.dumps(tab.to_dict())))
    np.testing.assert_array_equal(back.ages, tab.ages)
    np.testing.assert_array_equal(back.rates, tab.rates)


def test_config_from_dict_names_field():
    with pytest.raises(ValidationError) as exc:
        config_from_dict(LearningConfig, {"eps0": 2.0}, "learning")
    assert exc.value.field == "learning.eps0"
    with pytest.raises(ValidationError) as exc:
        config_from_dict(SolverConfig, {"bogus": 1}, "solver")
    assert exc.value.field == "solver.bogus"


def test_action_alternative():
    assert Action.ACCEPT.alternative is Action.REJECT
    assert Action.REPLACE.alternative is Action.CONTINUE
