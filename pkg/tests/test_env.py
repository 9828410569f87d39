import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from raas.core import (
    Action,
    BaselineHazard,
    CustomerArrival,
    CustomerDistribution,
    FinancialParams,
    GroundTruth,
    Phase,
    PhaseState,
    RobotCondition,
)
from raas.env import (
    Event,
    cumulative_hazard,
    customer_accepts,
    failure_probability,
    failure_times_from_exponential,
    sample_customer,
    sample_customers,
    sample_failure_time,
    simulate_rentals,
    step,
)

from conftest import THETA_TRUE, U_TRUE

E4 = np.array([0.0, 0.0, 0.0, 1.0])


def test_sample_customer_moments():
    rng = np.random.default_rng(1)
    x, T, tau = sample_customers(CustomerDistribution(), 100_000, rng)
    assert abs(tau.mean() - 5.0) < 0.1
    assert abs(T.mean() - 10.0) < 0.2
    assert np.all(x >= 0)
    assert np.all(np.linalg.norm(x, axis=1) <= 1 + 1e-12)
    assert abs(np.mean(np.sum(x * x, axis=1)) - 4 / 6) < 0.01


def test_sample_customer_matches_rejection_sampler():
    # brute-force oracle: rejection from the unit cube
    rng = np.random.default_rng(2)
    cube = rng.random((400_000, 4))
    ref = cube[np.linalg.norm(cube, axis=1) <= 1][:50_000]
    x, _, _ = sample_customers(CustomerDistribution(), 50_000, np.random.default_rng(3))
    for j in range(4):
        assert stats.ks_2samp(x[:, j], ref[:, j]).pvalue > 0.001
    c = sample_customer(CustomerDistribution(), rng)
    assert isinstance(c, CustomerArrival)


def test_customer_accepts_rule():
    assert customer_accepts(U_TRUE, E4, 0.71)
    assert customer_accepts(U_TRUE, E4, 0.0)
    assert not customer_accepts(U_TRUE, E4, 0.7100001)
    with pytest.raises(ValueError):
        customer_accepts(U_TRUE, E4, -0.1)


def test_cumulative_hazard_examples():
    assert cumulative_hazard(BaselineHazard.constant(0.001), 0.0, 10.0) == pytest.approx(0.01, abs=1e-15)
    assert cumulative_hazard(BaselineHazard.constant(0.3), 4.0, 4.0) == 0.0
    tab = BaselineHazard.table([0.0, 100.0], [0.002, 0.002])
    assert cumulative_hazard(tab, 10.0, 30.0) == pytest.approx(0.04, abs=1e-9)
    with pytest.raises(ValueError):
        cumulative_hazard(tab, 3.0, 2.0)


def test_failure_probability_examples():
    base = BaselineHazard.constant(0.001)
    cond = RobotCondition.new(4)
    zero = np.zeros(4)
    assert failure_probability(zero, base, cond, E4, 10.0) == pytest.approx(1 - math.exp(-0.01), rel=1e-12)
    assert failure_probability(zero, base, cond, E4, 10.0) == pytest.approx(0.009950, abs=1e-6)
    assert failure_probability(THETA_TRUE, base, cond, E4, 0.0) == 0.0
    theta = np.array([0.0, 0.0, 0.0, 1.0])
    cond2 = RobotCondition(np.array([0.0, 0.0, 0.0, 1.0]), 0.0)
    assert failure_probability(theta, base, cond2, E4, 10.0) == pytest.approx(0.07123, abs=1e-5)


def test_failure_time_inversion_examples():
    base = BaselineHazard.constant(0.001)
    # E = 0.01 reaches exactly T = 10: a tie counts as survival
    assert np.isnan(failure_times_from_exponential(0.01, 0.0, base, 0.0, 10.0)[0])
    assert failure_times_from_exponential(0.005, 0.0, base, 0.0, 10.0)[0] == pytest.approx(5.0)
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert sample_failure_time(THETA_TRUE, BaselineHazard.constant(0.0), RobotCondition.new(4), E4, 50.0, rng) is None


def test_failure_time_inversion_table_bisection():
    tab = BaselineHazard.table([0.0, 10.0, 20.0], [0.0, 0.2, 0.0])
    E = np.array([0.1, 0.5, 1.5])
    f = failure_times_from_exponential(E, 0.0, tab, 2.0, 15.0)
    for e, fi in zip(E, f):
        if np.isnan(fi):
            assert tab.cumulative(17.0) - tab.cumulative(2.0) <= e
        else:
            assert tab.cumulative(2.0 + fi) - tab.cumulative(2.0) == pytest.approx(e, abs=1e-8)


def test_failure_times_memoryless_when_theta_zero():
    rng = np.random.default_rng(5)
    lam = 0.05
    base = BaselineHazard.constant(lam)
    cond = RobotCondition(np.array([3.0, 1.0, 2.0, 0.5]), 37.0)
    f = np.array([sample_failure_time(np.zeros(4), base, cond, E4, 1e9, rng) for _ in range(10_000)])
    assert stats.kstest(f, "expon", args=(0, 1 / lam)).pvalue > 0.01


@settings(max_examples=40, deadline=None)
@given(
    X=st.lists(st.floats(0.0, 3.0), min_size=4, max_size=4),
    j=st.integers(0, 3),
    bump=st.floats(0.0, 2.0),
    T=st.floats(0.0, 60.0),
    dT=st.floats(0.0, 20.0),
    lam=st.floats(0.0, 0.01),
    dlam=st.floats(0.0, 0.01),
)
def test_failure_probability_monotone(X, j, bump, T, dT, lam, dlam):
    X = np.array(X)
    Xb = X.copy()
    Xb[j] += bump
    cond, condb = RobotCondition(X, 5.0), RobotCondition(Xb, 5.0)
    x = np.array([0.2, 0.1, 0.3, 0.4])
    b, bb = BaselineHazard.constant(lam), BaselineHazard.constant(lam + dlam)
    p = failure_probability(THETA_TRUE, b, cond, x, T)
    assert 0.0 <= p < 1.0 or p == pytest.approx(1.0)
    assert failure_probability(THETA_TRUE, b, cond, x, T + dT) >= p - 1e-15
    assert failure_probability(THETA_TRUE, bb, cond, x, T) >= p - 1e-15
    assert failure_probability(THETA_TRUE, b, condb, x, T) >= p - 1e-15


def _arrival(cond=None):
    return PhaseState(cond or RobotCondition.new(4), Phase.ARRIVAL)


def test_step_examples(truth, fin):
    rng = np.random.default_rng(0)
    idle = PhaseState(RobotCondition(np.ones(4), 3.0), Phase.IDLE)
    out = step(idle, Action.CONTINUE, truth, fin, rng, tau=5.0)
    assert out.reward == pytest.approx(-0.02) and out.elapsed == 5.0 and out.event == Event.IDLED
    assert out.next_state.phi == Phase.ARRIVAL
    out = step(idle, Action.REPLACE, truth, fin, rng, tau=5.0)
    assert out.reward == pytest.approx(-0.32) and out.event == Event.REPLACED
    assert out.next_state.condition.is_new
    assert out.amount == pytest.approx(-1.5 - 0.1)

    safe = GroundTruth(U_TRUE, THETA_TRUE, BaselineHazard.constant(0.0))
    out = step(_arrival(), Action.ACCEPT, safe, fin, rng, customer=CustomerArrival(E4, 10.0, 5.0), price=0.71)
    assert out.event == Event.RENTAL_SUCCESS
    assert out.reward == pytest.approx(0.071) and out.elapsed == 10.0
    assert out.next_state.condition.t_age == 10.0
    np.testing.assert_array_equal(out.next_state.condition.X, E4)


def test_step_reject_branches(truth, fin):
    rng = np.random.default_rng(0)
    cust = CustomerArrival(E4, 10.0, 5.0)
    cond = RobotCondition(np.ones(4) * 0.5, 7.0)
    out = step(_arrival(cond), Action.REJECT, truth, fin, rng, customer=cust)
    assert (out.reward, out.elapsed, out.event) == (0.0, 0.0, Event.OPERATOR_REJECTED)
    assert out.next_state.condition == cond and out.next_state.phi == Phase.IDLE
    out = step(_arrival(cond), Action.ACCEPT, truth, fin, rng, customer=cust, price=0.72)
    assert (out.reward, out.elapsed, out.event) == (0.0, 0.0, Event.PRICED_REJECTED)


def test_step_failure_branch(fin):
    rng = np.random.default_rng(0)
    hot = GroundTruth(U_TRUE, THETA_TRUE, BaselineHazard.constant(5.0))
    out = step(_arrival(RobotCondition(np.ones(4), 2.0)), Action.ACCEPT, hot, fin, rng,
               customer=CustomerArrival(E4, 10.0, 5.0), price=0.5)
    assert out.event == Event.RENTAL_FAILURE
    assert 0 < out.elapsed < 10.0 and out.elapsed == out.failure_time
    assert out.reward == pytest.approx((0.5 - 0.75 - 1.5) / out.elapsed)
    assert out.reward < 0.5 / out.elapsed
    assert out.next_state.condition.is_new


def test_step_phase_errors(truth, fin):
    rng = np.random.default_rng(0)
    cust = CustomerArrival(E4, 10.0, 5.0)
    with pytest.raises(ValueError):
        step(_arrival(), Action.CONTINUE, truth, fin, rng, customer=cust)
    with pytest.raises(ValueError):
        step(_arrival(), Action.ACCEPT, truth, fin, rng)
    with pytest.raises(ValueError):
        step(_arrival(), Action.ACCEPT, truth, fin, rng, customer=cust)
    idle = PhaseState(RobotCondition.new(4), Phase.IDLE)
    with pytest.raises(ValueError):
        step(idle, Action.ACCEPT, truth, fin, rng, customer=cust, price=0.1)
    with pytest.raises(ValueError):
        step(idle, Action.CONTINUE, truth, fin, rng)


def test_simulate_rentals_records_consistent():
    Z, entry, exit_, failed = simulate_rentals(THETA_TRUE, BaselineHazard.constant(0.01), 500, np.random.default_rng(0))
    assert np.all(exit_ > entry)
    assert np.all(entry[1:][failed[:-1]] == 0.0)
    assert failed.sum() > 0
