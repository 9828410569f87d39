"""Online learn-and-control loop, the oracle benchmark and run metrics.

Each run draws three independent streams from ``SeedSequence(seed)``:
customers, rental outcomes and the learner's own randomness. An online run
and an oracle run with the same seed therefore see the same customers and
the same unit-exponential failure levels.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Action,
    BaselineHazard,
    CustomerArrival,
    CustomerDistribution,
    FinancialParams,
    GroundTruth,
    LearningConfig,
    Phase,
    PhaseState,
    RobotCondition,
    SolverConfig,
)
from .env import Event, StepOutcome, sample_customers, step
from .policy import MDPModel, PolicyTables, decide_arrival, decide_idle, epsilon_greedy, value_iteration
from .survival import CoxDegradationEstimator
from .utility import ProjectedVolumeLearner

log = logging.getLogger(__name__)

EXPLORE_U = "explore_u"
COLLECT_THETA = "collect_theta"
CONTROL = "control"

HISTORY_COLUMNS = (
    "k", "wall_time", "event", "price", "reward_rate", "elapsed", "n_F", "n_R", "err_u", "err_theta", "phase",
)


@dataclass(frozen=True)
class HistoryEvent:
    """One environment transition.

    ``price`` is the offered price (0 when no price was offered) and
    ``amount`` the raw cash flow of the transition.
    """

    k: int
    wall_time: float
    event: Event
    price: float
    reward_rate: float
    elapsed: float
    n_F: int
    n_R: int
    err_u: float
    err_theta: float
    phase: str
    amount: float


@dataclass
class RunReport:
    history: list[HistoryEvent]
    u_hat: np.ndarray
    theta_hat: np.ndarray
    baseline_hat: BaselineHazard | None
    total_profit: float
    elapsed_time: float
    phase1_length: int | None = None
    first_fit_customer: int | None = None
    n_retrains: int = 0
    feasibility_violations: int = 0
    n_cuts: int = 0
    tables: PolicyTables | None = None
    theta_fits: list[tuple[int, np.ndarray]] = field(default_factory=list)
    u_path: np.ndarray | None = None
    theta_path: np.ndarray | None = None

    @property
    def n_F(self) -> int:
        return self.history[-1].n_F if self.history else 0

    @property
    def n_R(self) -> int:
        return self.history[-1].n_R if self.history else 0


def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


class _Recorder:
    """Accumulates events, counters and the running profit."""

    def __init__(self, truth: GroundTruth | None):
        self.truth = truth
        self.history: list[HistoryEvent] = []
        self.wall = 0.0
        self.profit = 0.0
        self.n_F = 0
        self.n_R = 0
        self.u_path: list[np.ndarray] = []
        self.theta_path: list[np.ndarray] = []

    def end_customer(self, u_hat, theta_hat):
        self.u_path.append(np.array(u_hat, dtype=float))
        self.theta_path.append(np.array(theta_hat, dtype=float))

    def finish(self, report: "RunReport"):
        report.history = self.history
        report.total_profit = self.profit
        report.elapsed_time = self.wall
        report.u_path = np.array(self.u_path)
        report.theta_path = np.array(self.theta_path)
        return report

    def add(self, k, out: StepOutcome, price, phase, u_hat, theta_hat):
        self.wall += out.elapsed
        self.profit += out.amount
        if out.event == Event.RENTAL_FAILURE:
            self.n_F += 1
            self.n_R += 1
        elif out.event == Event.REPLACED:
            self.n_R += 1
        if self.truth is not None:
            err_u = float(np.linalg.norm(u_hat - self.truth.u))
            err_t = float(np.linalg.norm(theta_hat - self.truth.theta))
        else:
            err_u = err_t = float("nan")
        self.history.append(HistoryEvent(
            k, self.wall, out.event, float(price), float(out.reward), float(out.elapsed), self.n_F, self.n_R,
            err_u, err_t, phase, float(out.amount),
        ))


def _rental_record(cond: RobotCondition, customer: CustomerArrival, out: StepOutcome):
    """``(z, entry, exit, failed)`` for a rental that started, else ``None``."""
    if out.event == Event.RENTAL_SUCCESS:
        return cond.X + customer.x, cond.t_age, cond.t_age + customer.T, False
    if out.event == Event.RENTAL_FAILURE:
        return cond.X + customer.x, cond.t_age, cond.t_age + out.failure_time, True
    return None


class _Dataset:
    def __init__(self, d):
        self.Z: list[np.ndarray] = []
        self.entry: list[float] = []
        self.exit: list[float] = []
        self.failed: list[bool] = []
        self.d = d

    def add(self, rec):
        if rec is None:
            return
        z, a, b, f = rec
        # a rental of zero length (failure at age 0+) carries no exposure
        if not b > a:
            return
        self.Z.append(z)
        self.entry.append(a)
        self.exit.append(b)
        self.failed.append(f)

    @property
    def n_failures(self) -> int:
        return int(sum(self.failed))

    def arrays(self):
        return np.array(self.Z).reshape(-1, self.d), np.array(self.entry), np.array(self.exit), np.array(self.failed)


def _customer_stream(dist: CustomerDistribution, N: int, rng):
    x, T, tau = sample_customers(dist, N, rng)
    for i in range(N):
        yield CustomerArrival(x[i], float(T[i]), float(tau[i]))


def run_online(
    truth: GroundTruth,
    dist: CustomerDistribution | None = None,
    fin: FinancialParams | None = None,
    lcfg: LearningConfig | None = None,
    scfg: SolverConfig | None = None,
    N: int = 20000,
    seed: int = 0,
    stop_after_phase1: bool = False,
) -> RunReport:
    """Learn ``u``, then ``theta`` and ``lambda0``, and control the robot online.

    Parameters
    ----------
    truth : GroundTruth
        Parameters of the simulated environment (unknown to the learner; used
        only to simulate responses and to log estimation errors).
    dist, fin, lcfg, scfg : configs, optional
    N : int
        Number of customers.
    seed : int
    stop_after_phase1 : bool
        End the run as soon as utility exploration terminates.

    Returns
    -------
    RunReport
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    dist = dist or CustomerDistribution(d=truth.d)
    fin = fin or FinancialParams()
    lcfg = lcfg or LearningConfig()
    scfg = scfg or SolverConfig()
    rng_cust, rng_env, rng_agent = _streams(seed)
    d = truth.d

    learner = ProjectedVolumeLearner.from_config(d, lcfg, random_state=rng_agent)
    u_hat = learner.centroid()
    theta_hat = np.zeros(d)
    baseline_hat = None
    rec = _Recorder(truth)
    rec.end_customer(u_hat, theta_hat)
    data = _Dataset(d)
    report = RunReport([], u_hat, theta_hat, None, 0.0, 0.0)

    policy = None
    model = None
    eps = lcfg.eps0
    failures_at_fit = 0
    phase = EXPLORE_U
    state = PhaseState(RobotCondition.new(d), Phase.ARRIVAL)

    def fit_and_solve(k, init):
        nonlocal theta_hat, baseline_hat, model, policy, failures_at_fit
        est = CoxDegradationEstimator(min_failures=lcfg.min_failures).fit(*data.arrays())
        theta_hat = est.coef_
        baseline_hat = est.baseline_
        model = MDPModel(GroundTruth(u_hat, theta_hat, baseline_hat), fin, dist, lcfg.price_margin)
        policy = value_iteration(model, scfg, None if init is None else init.idle_value)
        failures_at_fit = data.n_failures
        report.theta_fits.append((k, theta_hat.copy()))
        log.debug("customer %d: fitted theta %s from %d failures", k, theta_hat, data.n_failures)

    for k, cust in enumerate(_customer_stream(dist, N, rng_cust), start=1):
        cond = state.condition
        if phase == EXPLORE_U:
            price = learner.propose_price(cust.x)
            out = step(state, Action.ACCEPT, truth, fin, rng_env, customer=cust, price=price)
            accepted = out.event != Event.PRICED_REJECTED
            learner.partial_fit(cust.x, price, accepted)
            report.n_cuts += 1
            report.feasibility_violations += learner.set_.violations(truth.u)
            u_hat = learner.coef_
        elif phase == COLLECT_THETA:
            price = max(float(u_hat @ cust.x) - lcfg.eps_p, 0.0)
            out = step(state, Action.ACCEPT, truth, fin, rng_env, customer=cust, price=price)
        else:
            action = epsilon_greedy(decide_arrival(policy, model, cond, cust.x, cust.T), eps, rng_agent)
            price = model.price(cust.x) if action == Action.ACCEPT else 0.0
            out = step(state, action, truth, fin, rng_env, customer=cust, price=price)
        rec.add(k, out, price, phase, u_hat, theta_hat)
        data.add(_rental_record(cond, cust, out))
        state = out.next_state

        if phase == CONTROL:
            idle = decide_idle(policy, model, state.condition)
            if lcfg.explore_idle:
                idle = epsilon_greedy(idle, eps, rng_agent)
        else:
            idle = Action.CONTINUE
        out = step(state, idle, truth, fin, rng_env, tau=cust.tau)
        rec.add(k, out, 0.0, phase, u_hat, theta_hat)
        state = out.next_state
        rec.end_customer(u_hat, theta_hat)

        if phase == EXPLORE_U and learner.converged_:
            report.phase1_length = k
            if stop_after_phase1:
                break
            phase = COLLECT_THETA
        if phase == COLLECT_THETA and data.n_failures >= lcfg.min_failures:
            fit_and_solve(k, None)
            report.first_fit_customer = k
            phase = CONTROL
        elif phase == CONTROL and data.n_failures - failures_at_fit >= lcfg.K:
            fit_and_solve(k, policy)
            eps *= lcfg.decay
            report.n_retrains += 1

    report.u_hat = np.asarray(u_hat, dtype=float)
    report.theta_hat = np.asarray(theta_hat, dtype=float)
    report.baseline_hat = baseline_hat
    report.tables = policy
    return rec.finish(report)


def run_oracle(
    truth: GroundTruth,
    dist: CustomerDistribution | None = None,
    fin: FinancialParams | None = None,
    scfg: SolverConfig | None = None,
    N: int = 20000,
    seed: int = 0,
    tables: PolicyTables | None = None,
) -> RunReport:
    """Greedy control with the policy solved from the true parameters; prices ``u @ x``.

    ``tables`` may pass a policy already solved for the same model.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    dist = dist or CustomerDistribution(d=truth.d)
    fin = fin or FinancialParams()
    scfg = scfg or SolverConfig()
    rng_cust, rng_env, _ = _streams(seed)
    model = MDPModel(truth, fin, dist, 0.0)
    policy = tables if tables is not None else value_iteration(model, scfg)
    rec = _Recorder(truth)
    rec.end_customer(truth.u, truth.theta)
    state = PhaseState(RobotCondition.new(truth.d), Phase.ARRIVAL)
    for k, cust in enumerate(_customer_stream(dist, N, rng_cust), start=1):
        action = decide_arrival(policy, model, state.condition, cust.x, cust.T)
        price = model.price(cust.x) if action == Action.ACCEPT else 0.0
        out = step(state, action, truth, fin, rng_env, customer=cust, price=price)
        rec.add(k, out, price, CONTROL, truth.u, truth.theta)
        state = out.next_state
        out = step(state, decide_idle(policy, model, state.condition), truth, fin, rng_env, tau=cust.tau)
        rec.add(k, out, 0.0, CONTROL, truth.u, truth.theta)
        state = out.next_state
        rec.end_customer(truth.u, truth.theta)
    report = RunReport([], truth.u.copy(), truth.theta.copy(), truth.baseline, 0.0, 0.0, tables=policy)
    return rec.finish(report)


# --- metrics --------------------------------------------------------------------------


def _times_amounts(report: RunReport):
    t = np.array([e.wall_time for e in report.history])
    a = np.array([e.amount for e in report.history])
    return t, a


def rolling_profit_rate(report: RunReport, window: float, times=None):
    """Net cash flow in ``(t - window, t]`` divided by ``window``.

    Evaluated at every event time by default, or at the given ``times``.
    Returns ``(times, rates)``.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    t, a = _times_amounts(report)
    cum = np.concatenate([[0.0], np.cumsum(a)])
    q = t if times is None else np.asarray(times, dtype=float)
    hi = np.searchsorted(t, q, side="right")
    lo = np.searchsorted(t, q - window, side="right")
    return q, (cum[hi] - cum[lo]) / window


def accounting_profit(report: RunReport, fin: FinancialParams) -> float:
    """Profit recomputed from the event log: prices - F n_F - R n_R - h sum(tau)."""
    revenue = sum(e.price for e in report.history if e.event in (Event.RENTAL_SUCCESS, Event.RENTAL_FAILURE))
    idle_time = sum(e.elapsed for e in report.history if e.event in (Event.IDLED, Event.REPLACED))
    return revenue - fin.F * report.n_F - fin.R * report.n_R - fin.h * idle_time


def estimation_errors(report: RunReport, truth: GroundTruth):
    """``(k, ||u_hat_k - u||, ||theta_hat_k - theta||)`` for ``k = 0, ..., N``.

    Entry ``k`` is the estimate held after customer ``k`` (``k = 0`` is the
    initial estimate), so the series is piecewise constant between updates.
    """
    ks = np.arange(report.u_path.shape[0])
    eu = np.linalg.norm(report.u_path - truth.u, axis=1)
    et = np.linalg.norm(report.theta_path - truth.theta, axis=1)
    return ks, eu, et


# --- CSV --------------------------------------------------------------------------------


def _g(v) -> str:
    return f"{float(v):.17g}"


def write_history_csv(path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for e in report.history:
            w.writerow([
                e.k, _g(e.wall_time), e.event.value, _g(e.price), _g(e.reward_rate), _g(e.elapsed),
                e.n_F, e.n_R, _g(e.err_u), _g(e.err_theta), e.phase,
            ])
