"""Ground-truth rental environment: customers, acceptance, Cox failures, transitions.

All stochastic functions take an explicit :class:`numpy.random.Generator`
(PCG64 via :func:`numpy.random.default_rng`) so runs are bit-reproducible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import (
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

BISECTION_TOL = 1e-9


class Event(str, enum.Enum):
    PRICED_REJECTED = "priced_rejected"
    RENTAL_SUCCESS = "rental_success"
    RENTAL_FAILURE = "rental_failure"
    IDLED = "idled"
    REPLACED = "replaced"
    OPERATOR_REJECTED = "operator_rejected"


@dataclass(frozen=True)
class StepOutcome:
    """Result of one transition.

    ``reward`` is normalized per unit of elapsed time as in the MDP; ``amount``
    is the raw cash flow of the transition (revenue minus costs).
    """

    next_state: PhaseState
    reward: float
    elapsed: float
    event: Event
    amount: float = 0.0
    failure_time: float | None = None


def sample_contexts(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from the positive-orthant part of the unit ``d``-ball."""
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / d)
    return np.abs(g * r[:, None])


def sample_customers(dist: CustomerDistribution, n: int, rng: np.random.Generator):
    """Vectorized draw of ``n`` customers as arrays ``(x, T, tau)``."""
    x = sample_contexts(dist.d, n, rng)
    T = rng.exponential(dist.mean_T, n)
    tau = rng.exponential(dist.mean_tau, n)
    # exponential draws are > 0 almost surely; guard the measure-zero case
    T = np.maximum(T, np.finfo(float).tiny)
    tau = np.maximum(tau, np.finfo(float).tiny)
    return x, T, tau


def sample_customer(dist: CustomerDistribution, rng: np.random.Generator) -> CustomerArrival:
    x, T, tau = sample_customers(dist, 1, rng)
    return CustomerArrival(x[0], float(T[0]), float(tau[0]))


def customer_accepts(u, x, p: float) -> bool:
    """Participation rule: accept iff utility ``u @ x`` is at least the price."""
    if p < 0:
        raise ValueError("price must be >= 0")
    return bool(float(np.dot(u, x)) >= p)


def cumulative_hazard(baseline: BaselineHazard, t0: float, t1):
    """Baseline hazard integrated over ages ``[t0, t1]``."""
    t1 = np.asarray(t1, dtype=float)
    if np.any(t1 < t0) or t0 < 0:
        raise ValueError("need 0 <= t0 <= t1")
    if baseline.is_constant:
        out = baseline.rate * (t1 - t0)
    else:
        out = baseline.cumulative(t1) - baseline.cumulative(t0)
    return out if np.ndim(out) else float(out)


def failure_probability(theta, baseline: BaselineHazard, cond: RobotCondition, x, T: float) -> float:
    if T < 0:
        raise ValueError("T must be >= 0")
    if T == 0:
        return 0.0
    lin = float(np.dot(theta, cond.X + np.asarray(x, dtype=float)))
    exposure = math.exp(lin) * cumulative_hazard(baseline, cond.t_age, cond.t_age + T)
    return -math.expm1(-exposure)


def failure_times_from_exponential(E, lin: float, baseline: BaselineHazard, t_age: float, T: float):
    """Invert the conditional cumulative hazard at unit-exponential levels ``E``.

    Returns an array with the failure time into the rental, or ``nan`` where
    the robot survives (a tie at exactly ``T`` counts as survival).
    """
    E = np.atleast_1d(np.asarray(E, dtype=float))
    scale = math.exp(lin)
    if baseline.is_constant:
        if baseline.rate == 0:
            return np.full(E.shape, np.nan)
        t_star = E / (scale * baseline.rate)
    else:
        base0 = baseline.cumulative(t_age)
        target = E / scale
        total = baseline.cumulative(t_age + T) - base0
        t_star = np.full(E.shape, np.inf)
        hit = target < total
        if np.any(hit):
            lo = np.zeros(int(hit.sum()))
            hi = np.full(lo.shape, float(T))
            tgt = target[hit]
            while np.max(hi - lo) > BISECTION_TOL:
                mid = 0.5 * (lo + hi)
                below = baseline.cumulative(t_age + mid) - base0 < tgt
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            t_star[hit] = hi
    return np.where(t_star < T, t_star, np.nan)


def sample_failure_time(theta, baseline, cond: RobotCondition, x, T: float, rng) -> float | None:
    """Draw the failure time of one rental, or ``None`` if it completes."""
    if not T > 0:
        raise ValueError("T must be > 0")
    lin = float(np.dot(theta, cond.X + np.asarray(x, dtype=float)))
    f = failure_times_from_exponential(rng.exponential(1.0), lin, baseline, cond.t_age, T)[0]
    return None if np.isnan(f) else float(f)


def step(
    state: PhaseState,
    action: Action,
    truth: GroundTruth,
    fin: FinancialParams,
    rng: np.random.Generator,
    *,
    customer: CustomerArrival | None = None,
    price: float | None = None,
    tau: float | None = None,
) -> StepOutcome:
    """Execute one transition of the rental MDP under the true parameters.

    Arrival decisions (``ACCEPT``/``REJECT``) need ``customer`` (and ``price``
    when accepting) and lead to the idle phase; idle decisions
    (``CONTINUE``/``REPLACE``) consume the interarrival time ``tau`` and lead
    to the next arrival.
    """
    cond = state.condition
    d = cond.X.size
    if state.phi == Phase.ARRIVAL:
        if action not in (Action.ACCEPT, Action.REJECT):
            raise ValueError(f"action {action} not allowed in the arrival phase")
        if customer is None:
            raise ValueError("arrival phase requires a customer")
        if action == Action.REJECT:
            return StepOutcome(PhaseState(cond, Phase.IDLE), 0.0, 0.0, Event.OPERATOR_REJECTED)
        if price is None:
            raise ValueError("accepting requires a price")
        if not customer_accepts(truth.u, customer.x, price):
            return StepOutcome(PhaseState(cond, Phase.IDLE), 0.0, 0.0, Event.PRICED_REJECTED)
        f = sample_failure_time(truth.theta, truth.baseline, cond, customer.x, customer.T, rng)
        if f is None:
            nxt = PhaseState(cond.after_rental(customer.x, customer.T), Phase.IDLE)
            return StepOutcome(nxt, price / customer.T, customer.T, Event.RENTAL_SUCCESS, amount=price)
        amount = price - fin.F - fin.R
        nxt = PhaseState(RobotCondition.new(d), Phase.IDLE)
        # f can underflow to 0 only for astronomically large hazards
        reward = amount / f if f > 0 else -math.inf
        return StepOutcome(nxt, reward, f, Event.RENTAL_FAILURE, amount=amount, failure_time=f)

    if action not in (Action.CONTINUE, Action.REPLACE):
        raise ValueError(f"action {action} not allowed in the idle phase")
    if tau is None or not tau > 0:
        raise ValueError("idle phase requires the next interarrival time tau > 0")
    if action == Action.CONTINUE:
        return StepOutcome(PhaseState(cond, Phase.ARRIVAL), -fin.h, tau, Event.IDLED, amount=-fin.h * tau)
    return StepOutcome(
        PhaseState(RobotCondition.new(d), Phase.ARRIVAL),
        -fin.R / tau - fin.h,
        tau,
        Event.REPLACED,
        amount=-fin.R - fin.h * tau,
    )


def simulate_rentals(
    theta,
    baseline: BaselineHazard,
    n_rentals: int,
    rng: np.random.Generator,
    dist: CustomerDistribution | None = None,
    retire_prob: float = 0.1,
):
    """Synthetic rental histories for estimator checks.

    Robots run back-to-back rentals; after a failure the robot is new, and a
    surviving robot is retired with probability ``retire_prob``. Returns
    arrays ``(Z, entry, exit, failed)`` with ``Z = X + x`` at rental start.
    """
    theta = np.asarray(theta, dtype=float)
    dist = dist or CustomerDistribution(d=theta.size)
    xs, Ts, _ = sample_customers(dist, n_rentals, rng)
    E = rng.exponential(1.0, n_rentals)
    retire = rng.random(n_rentals) < retire_prob
    Z = np.empty_like(xs)
    entry = np.empty(n_rentals)
    exit_ = np.empty(n_rentals)
    failed = np.zeros(n_rentals, dtype=bool)
    X = np.zeros(theta.size)
    age = 0.0
    for i in range(n_rentals):
        z = X + xs[i]
        f = failure_times_from_exponential(E[i], float(theta @ z), baseline, age, Ts[i])[0]
        Z[i] = z
        entry[i] = age
        if np.isnan(f):
            exit_[i] = age + Ts[i]
            X, age = z, age + Ts[i]
            if retire[i]:
                X, age = np.zeros(theta.size), 0.0
        else:
            exit_[i] = age + f
            failed[i] = True
            X, age = np.zeros(theta.size), 0.0
    return Z, entry, exit_, failed
