"""Projected-state rental MDP: value iteration, greedy decisions, epsilon-greedy.

The arrival decision depends on the robot and customer only through
``(c_deg, c_rev, T, t)`` and the idle decision only through ``(c_c, t)``.
Value iteration runs on the idle grid; the expectation over the next customer
uses a fixed common-random-numbers sample, and each sampled arrival is
evaluated at its exact projected state (the idle values it needs are
interpolated bilinearly). The 4-D arrival table is assembled from the
converged idle values for export and inspection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import (
    Action,
    BaselineHazard,
    CustomerDistribution,
    FinancialParams,
    GroundTruth,
    Grid,
    RobotCondition,
    SolverConfig,
    ValidationError,
    dot,
    NORM_SLACK,
)
from .env import sample_customers


class ValueIterationError(RuntimeError):
    """Raised when value iteration produces non-finite values."""


# relative gap below which two action values count as tied
TIE_RTOL = 1e-12


def _prefers_first(q_first, q_second):
    """True where the tie-favoured action (Accept, Continue) is chosen."""
    return q_first >= q_second - TIE_RTOL * (1.0 + np.abs(q_second))


# --- projected states ----------------------------------------------------------


@dataclass(frozen=True)
class ProjectedArrivalState:
    c_deg: float
    c_rev: float
    T: float
    t: float

    def __post_init__(self):
        for name in ("c_deg", "c_rev", "T", "t"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(name, "must be finite and >= 0")
        if self.c_rev > 1 + NORM_SLACK:
            raise ValidationError("c_rev", "must be <= 1")


@dataclass(frozen=True)
class ProjectedIdleState:
    c_c: float
    t: float

    def __post_init__(self):
        for name in ("c_c", "t"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(name, "must be finite and >= 0")


def project_arrival_state(theta, u, cond: RobotCondition, x, T: float) -> ProjectedArrivalState:
    return ProjectedArrivalState(dot(theta, cond.X) + dot(theta, x), dot(u, x), float(T), cond.t_age)


def project_idle_state(theta, cond: RobotCondition) -> ProjectedIdleState:
    return ProjectedIdleState(dot(theta, cond.X), cond.t_age)


# --- model -----------------------------------------------------------------------


@dataclass(frozen=True)
class MDPModel:
    """Parameters the policy is computed for (true or estimated).

    ``price_margin`` is subtracted from the utility to get the posted price,
    so the projected revenue is ``max(u @ x - price_margin, 0)``.
    """

    truth: GroundTruth
    fin: FinancialParams = field(default_factory=FinancialParams)
    dist: CustomerDistribution | None = None
    price_margin: float = 0.0

    def __post_init__(self):
        if self.dist is None:
            object.__setattr__(self, "dist", CustomerDistribution(d=self.truth.d))
        if self.dist.d != self.truth.d:
            raise ValidationError("dist.d", "must match the parameter dimension")
        if not self.price_margin >= 0:
            raise ValidationError("price_margin", "must be >= 0")

    @property
    def theta(self) -> np.ndarray:
        return self.truth.theta

    @property
    def u(self) -> np.ndarray:
        return self.truth.u

    @property
    def baseline(self) -> BaselineHazard:
        return self.truth.baseline

    def price(self, x) -> float:
        return max(dot(self.u, x) - self.price_margin, 0.0)

    def revenues(self, X) -> np.ndarray:
        return np.maximum(np.asarray(X, dtype=float) @ self.u - self.price_margin, 0.0)


_QUAD_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_legendre(n: int):
    if n not in _QUAD_CACHE:
        _QUAD_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _QUAD_CACHE[n]


def _baseline_arrays(baseline: BaselineHazard):
    """Knots, rates and cumulative values of a baseline as a piecewise-linear table."""
    if baseline.is_constant:
        r = baseline.rate
        return np.array([0.0, 1.0]), np.array([r, r]), np.array([0.0, r])
    return baseline.ages, baseline.rates, baseline.knots_cumulative


@njit(cache=True)
def _cum_rate(ages, rates, cum, t):
    """Cumulative baseline and rate at age ``t`` (constant extension outside the table)."""
    n = ages.size
    if t <= ages[0]:
        return rates[0] * t, rates[0]
    if t >= ages[n - 1]:
        return cum[n - 1] + rates[n - 1] * (t - ages[n - 1]), rates[n - 1]
    i = np.searchsorted(ages, t, side="right") - 1
    dt = t - ages[i]
    slope = (rates[i + 1] - rates[i]) / (ages[i + 1] - ages[i])
    return cum[i] + rates[i] * dt + 0.5 * slope * dt * dt, rates[i] + slope * dt


@njit(cache=True)
def _weights_at(f, rho, mode):
    if mode == 0:
        return 1.0 / f, 0.0
    return -np.expm1(-rho * f) / (rho * f), np.exp(-rho * f)


@njit(cache=True)
def _failure_kernel(c, t, T, ages, rates, cum, f_floor, nodes, gw, rho, mode):
    """``p_fail`` and ``E[1{f < T} w(f)]`` for the two weights of ``mode``.

    ``mode = 0``: ``w1 = 1/f``. ``mode = 1``: ``w1 = (1 - e^{-rho f}) / (rho f)``
    and ``w2 = e^{-rho f}``. On ``[0, f_floor]`` the weights are taken at
    ``f_floor``; above it Gauss-Legendre quadrature in ``log f`` resolves
    hazards concentrated near 0.
    """
    n = c.size
    pf = np.empty(n)
    i1 = np.empty(n)
    i2 = np.empty(n)
    a = np.log(f_floor)
    w1f, w2f = _weights_at(f_floor, rho, mode)
    for k in range(n):
        sc = np.exp(c[k])
        L0, _ = _cum_rate(ages, rates, cum, t[k])
        LT, _ = _cum_rate(ages, rates, cum, t[k] + T[k])
        pf[k] = -np.expm1(-sc * (LT - L0))
        Lh, _ = _cum_rate(ages, rates, cum, t[k] + min(T[k], f_floor))
        head = -np.expm1(-sc * (Lh - L0))
        acc1 = head * w1f
        acc2 = head * w2f
        if T[k] > f_floor:
            half = 0.5 * (np.log(T[k]) - a)
            for j in range(nodes.size):
                f = np.exp(a + half * (nodes[j] + 1.0))
                L, r = _cum_rate(ages, rates, cum, t[k] + f)
                # density(f) df = density(f) f ds with s = log f
                m = sc * r * np.exp(-sc * (L - L0)) * f * half * gw[j]
                w1, w2 = _weights_at(f, rho, mode)
                acc1 += m * w1
                acc2 += m * w2
        i1[k] = acc1
        i2[k] = acc2
    return pf, i1, i2


def _failure_integrals(c_deg, t, T, baseline: BaselineHazard, f_floor, quad_points, rho=None):
    c_deg, t, T = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (c_deg, t, T)))
    shape = c_deg.shape
    if np.any(T < 0) or np.any(t < 0):
        raise ValueError("T and t must be >= 0")
    nodes, gw = _gauss_legendre(quad_points)
    ages, rates, cum = _baseline_arrays(baseline)
    out = _failure_kernel(
        np.ascontiguousarray(c_deg).ravel(), np.ascontiguousarray(t).ravel(), np.ascontiguousarray(T).ravel(),
        ages, rates, cum, float(f_floor), nodes, gw, 1.0 if rho is None else float(rho), 0 if rho is None else 1,
    )
    return [o.reshape(shape) for o in out]


def failure_terms(c_deg, t, T, baseline: BaselineHazard, f_floor: float = 1e-3, quad_points: int = 64):
    """Failure probability and floored reciprocal failure time of a rental.

    Returns ``(p_fail, n_fail)`` with ``n_fail = E[1{f < T} / max(f, f_floor)]``
    for a failure time ``f`` with hazard ``exp(c_deg) * lambda0(t + f)``.
    """
    p_fail, n_fail, _ = _failure_integrals(c_deg, t, T, baseline, f_floor, quad_points)
    return p_fail, n_fail


def _accrual(rho, dt):
    """``(1 - exp(-rho dt)) / rho``: discounted length of an interval ``dt``."""
    return -np.expm1(-rho * dt) / rho


def rental_coefficients(model: "MDPModel", cfg: SolverConfig, c_deg, t, T):
    """Coefficients of the Accept value of a rental.

    ``Q_accept = c_rev * rev + (c_rev - F - R) * fail + surv * V(c_deg, t + T) + reset * V(0, 0)``
    where ``V`` is the idle value function.
    """
    T = np.asarray(T, dtype=float)
    Tpos = np.where(T > 0, T, 1.0)
    if cfg.discounting == "epoch":
        pf, nf = failure_terms(c_deg, t, T, model.baseline, cfg.f_floor, cfg.quad_points)
        rev = np.where(T > 0, (1 - pf) / Tpos, 0.0)
        return rev, nf, cfg.gamma * (1 - pf), cfg.gamma * pf
    rho = -math.log(cfg.gamma)
    pf, fail, reset = _failure_integrals(c_deg, t, T, model.baseline, cfg.f_floor, cfg.quad_points, rho)
    rev = np.where(T > 0, (1 - pf) * _accrual(rho, T) / Tpos, 0.0)
    return rev, fail, (1 - pf) * np.exp(-rho * T), reset


@dataclass(frozen=True)
class IdleCoefficients:
    """``Q_continue = cont + disc * mean_m max(Q_accept_m, rej * V(c_c, t))``.

    ``Q_replace`` has the same form with ``rep`` in place of ``cont`` and
    the fresh-robot state ``(0, 0)``.
    """

    cont: float
    rep: float
    disc: float
    rej: float


def _bilinear(V, gc: Grid, gt: Grid, c, t):
    ic, fc = gc.locate(c)
    it, ft = gt.locate(t)
    return (
        (1 - fc) * (1 - ft) * V[ic, it]
        + fc * (1 - ft) * V[ic + 1, it]
        + (1 - fc) * ft * V[ic, it + 1]
        + fc * ft * V[ic + 1, it + 1]
    )


@dataclass(frozen=True)
class _CustomerSample:
    c_x: np.ndarray
    c_rev: np.ndarray
    T: np.ndarray
    tau: np.ndarray


def _customer_sample(model: MDPModel, cfg: SolverConfig) -> _CustomerSample:
    rng = np.random.default_rng(cfg.mc_seed)
    M = cfg.mc_samples
    x, _, _ = sample_customers(model.dist, M, rng)
    # stratified durations: epoch rewards carry 1/T and 1/tau, whose plain
    # Monte Carlo averages are dominated by the few shortest draws
    levels = (np.arange(M) + 0.5) / M
    T = -model.dist.mean_T * np.log1p(-levels[rng.permutation(M)])
    tau = -model.dist.mean_tau * np.log1p(-levels[rng.permutation(M)])
    return _CustomerSample(x @ model.theta, model.revenues(x), T, tau)


def reject_factor(cfg: SolverConfig) -> float:
    """Discount on the idle value after Reject (which takes no time)."""
    return cfg.gamma if cfg.discounting == "epoch" else 1.0


def revenue_sample(model: MDPModel, cfg: SolverConfig) -> np.ndarray:
    """Projected revenues of the fixed customer sample used by value iteration."""
    return _customer_sample(model, cfg).c_rev


def idle_coefficients(model: MDPModel, cfg: SolverConfig, tau) -> IdleCoefficients:
    fin = model.fin
    tau = np.asarray(tau, dtype=float)
    if cfg.discounting == "epoch":
        return IdleCoefficients(-fin.h, -fin.h - fin.R * float(np.mean(1.0 / tau)), cfg.gamma, reject_factor(cfg))
    rho = -math.log(cfg.gamma)
    w = _accrual(rho, tau)
    return IdleCoefficients(
        -fin.h * float(w.mean()), -float(np.mean((fin.R / tau + fin.h) * w)), float(np.exp(-rho * tau).mean()),
        reject_factor(cfg),
    )


def _accept_value(model, cfg, V, c_deg, c_rev, T, t):
    fin = model.fin
    rev, fail, surv, reset = rental_coefficients(model, cfg, c_deg, t, T)
    v00 = _bilinear(V, cfg.idle_c, cfg.idle_t, 0.0, 0.0)
    v_next = _bilinear(V, cfg.idle_c, cfg.idle_t, c_deg, t + np.asarray(T, dtype=float))
    return c_rev * rev + (c_rev - fin.F - fin.R) * fail + surv * v_next + reset * v00


def bellman_backup_arrival(s: ProjectedArrivalState, values, model: MDPModel, cfg: SolverConfig, c_c: float | None = None):
    """One-step arrival backup; returns ``(value, action)``.

    ``values`` is the idle value table on ``cfg.idle_c x cfg.idle_t``. The
    Reject branch keeps the robot's pre-rental degradation ``c_c``; when it
    is not given the arrival degradation ``s.c_deg`` is used.
    """
    V = np.asarray(values, dtype=float)
    c_keep = s.c_deg if c_c is None else c_c
    q_rej = reject_factor(cfg) * float(_bilinear(V, cfg.idle_c, cfg.idle_t, c_keep, s.t))
    q_acc = float(_accept_value(model, cfg, V, s.c_deg, s.c_rev, s.T, s.t))
    return (q_acc, Action.ACCEPT) if _prefers_first(q_acc, q_rej) else (q_rej, Action.REJECT)


def _idle_qs(model, cfg, V, sample: _CustomerSample, c_c, t):
    co = idle_coefficients(model, cfg, sample.tau)
    c_c = np.atleast_1d(np.asarray(c_c, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    C = c_c[:, None] + sample.c_x[None, :]
    shape = C.shape
    q_acc = _accept_value(
        model, cfg, V, C, np.broadcast_to(sample.c_rev, shape), np.broadcast_to(sample.T, shape),
        np.broadcast_to(t[:, None], shape),
    )
    q_rej = co.rej * _bilinear(V, cfg.idle_c, cfg.idle_t, c_c, t)[:, None]
    q_cont = co.cont + co.disc * np.maximum(q_acc, q_rej).mean(axis=1)
    v00 = _bilinear(V, cfg.idle_c, cfg.idle_t, 0.0, 0.0)
    q_acc0 = _accept_value(model, cfg, V, sample.c_x, sample.c_rev, sample.T, np.zeros_like(sample.c_x))
    q_rep = co.rep + co.disc * np.maximum(q_acc0, co.rej * v00).mean()
    return q_cont, float(q_rep)


def bellman_backup_idle(s: ProjectedIdleState, values, model: MDPModel, cfg: SolverConfig):
    """One-step idle backup over the fixed customer sample; returns ``(value, action)``."""
    sample = _customer_sample(model, cfg)
    q_cont, q_rep = _idle_qs(model, cfg, np.asarray(values, dtype=float), sample, s.c_c, s.t)
    q_cont = float(q_cont[0])
    return (q_cont, Action.CONTINUE) if _prefers_first(q_cont, q_rep) else (q_rep, Action.REPLACE)


# --- value iteration ---------------------------------------------------------------


@njit(cache=True)
def _interp(V, ic, fc, it, ft):
    return ((1 - fc) * (1 - ft) * V[ic, it] + fc * (1 - ft) * V[ic + 1, it]
            + (1 - fc) * ft * V[ic, it + 1] + fc * ft * V[ic + 1, it + 1])


@njit(cache=True)
def _backup(V, a_cont, b_cont, c_cont, i_c, f_c, i_t, f_t, a_rep, b_rep, c_rep, i_c0, f_c0, i_t0, f_t0,
            cont, rep, disc, rej, i00, f00c, j00, f00t):
    """One synchronous Bellman backup of the idle table.

    For grid point ``p`` and customer ``m`` the Accept value is
    ``a + b * V(next) + c * V(0, 0)`` with ``V(next)`` bilinear in the
    precomputed cell ``(i_c, f_c, i_t, f_t)``. Returns the new table, the
    Continue values, the Replace value and the sup-norm change.
    """
    nc, nt = V.shape
    npts, M = a_cont.shape
    v00 = _interp(V, i00, f00c, j00, f00t)
    acc = 0.0
    for m in range(M):
        qa = a_rep[m] + b_rep[m] * _interp(V, i_c0[m], f_c0[m], i_t0[m], f_t0[m]) + c_rep[m] * v00
        qr = rej * v00
        acc += qa if qa >= qr else qr
    q_rep = rep + disc * acc / M
    r = 0.0
    Vn = np.empty((nc, nt))
    q_cont = np.empty((nc, nt))
    for p in range(npts):
        pi = p // nt
        pj = p % nt
        qr = rej * V[pi, pj]
        acc = 0.0
        for m in range(M):
            qa = a_cont[p, m] + b_cont[p, m] * _interp(V, i_c[p, m], f_c[p, m], i_t[p, m], f_t[p, m]) \
                + c_cont[p, m] * v00
            acc += qa if qa >= qr else qr
        qc = cont + disc * acc / M
        q_cont[pi, pj] = qc
        v = qc if qc >= q_rep else q_rep
        Vn[pi, pj] = v
        diff = abs(v - V[pi, pj])
        if not (diff <= r):
            r = diff
    return Vn, q_cont, q_rep, r


@njit(cache=True)
def _sweeps(V, a_cont, b_cont, c_cont, i_c, f_c, i_t, f_t, a_rep, b_rep, c_rep, i_c0, f_c0, i_t0, f_t0,
            cont, rep, disc, rej, i00, f00c, j00, f00t, tol, max_iter):
    """Iterate :func:`_backup` until the sup-norm change is below ``tol``."""
    resid = np.empty(max_iter)
    n_done = 0
    for k in range(max_iter):
        V, _, _, r = _backup(V, a_cont, b_cont, c_cont, i_c, f_c, i_t, f_t, a_rep, b_rep, c_rep,
                             i_c0, f_c0, i_t0, f_t0, cont, rep, disc, rej, i00, f00c, j00, f00t)
        resid[k] = r
        n_done = k + 1
        if not np.isfinite(r) or r < tol:
            break
    return V, resid[:n_done]


@dataclass(frozen=True)
class PolicyTables:
    """Converged value tables and greedy actions.

    The accept value at an arrival grid point is linear in ``c_rev``:
    ``accept_base + accept_slope * c_rev``; ``reject_value`` does not depend
    on ``c_rev``. ``accept`` and ``replace`` are the greedy action masks
    (ties resolve to Accept and Continue).
    """

    cfg: SolverConfig
    idle_value: np.ndarray
    q_continue: np.ndarray
    q_replace: float
    replace: np.ndarray
    accept_base: np.ndarray
    accept_slope: np.ndarray
    reject_value: np.ndarray
    arrival_value: np.ndarray
    accept: np.ndarray
    residuals: np.ndarray
    converged: bool
    c_x_mean: float
    reject_factor: float

    @property
    def n_iter(self) -> int:
        return int(self.residuals.size)

    @property
    def arrival_action(self) -> np.ndarray:
        return np.where(self.accept, Action.ACCEPT.value, Action.REJECT.value)

    @property
    def idle_action(self) -> np.ndarray:
        return np.where(self.replace, Action.REPLACE.value, Action.CONTINUE.value)

    def idle_values_at(self, c_c, t):
        return _bilinear(self.idle_value, self.cfg.idle_c, self.cfg.idle_t, c_c, t)

    def arrival_slice(self, c_rev: float):
        """Greedy accept mask and value on the ``(c_deg, T, t)`` grid at revenue ``c_rev``."""
        q_acc = self.accept_base + self.accept_slope * c_rev
        q_rej = self.reject_value[:, None, :]
        return _prefers_first(q_acc, q_rej), np.maximum(q_acc, q_rej)


def _cells(grid: Grid, q):
    i, f = grid.locate(q)
    return np.ascontiguousarray(i, dtype=np.int64), np.ascontiguousarray(f, dtype=float)


def value_iteration(model: MDPModel, cfg: SolverConfig | None = None, init: np.ndarray | None = None) -> PolicyTables:
    """Solve the projected MDP by value iteration on the idle grid.

    Parameters
    ----------
    model : MDPModel
    cfg : SolverConfig, optional
    init : ndarray, optional
        Starting idle value table (e.g. from a previous solve); zeros otherwise.

    Returns
    -------
    PolicyTables
    """
    cfg = cfg or SolverConfig()
    fin = model.fin
    gc, gt = cfg.idle_c, cfg.idle_t
    sample = _customer_sample(model, cfg)
    co = idle_coefficients(model, cfg, sample.tau)

    cc, tt = np.meshgrid(gc.points, gt.points, indexing="ij")
    cc, tt = cc.ravel(), tt.ravel()
    C = cc[:, None] + sample.c_x[None, :]
    Tm = np.broadcast_to(sample.T, C.shape)
    Rm = np.broadcast_to(sample.c_rev, C.shape)
    Tt = np.broadcast_to(tt[:, None], C.shape)
    rev, fail, surv, reset = rental_coefficients(model, cfg, C, Tt, Tm)
    a_cont = np.ascontiguousarray(Rm * rev + (Rm - fin.F - fin.R) * fail)
    i_c, f_c = _cells(gc, C)
    i_t, f_t = _cells(gt, Tt + Tm)

    rev0, fail0, surv0, reset0 = rental_coefficients(model, cfg, sample.c_x, 0.0, sample.T)
    a_rep = sample.c_rev * rev0 + (sample.c_rev - fin.F - fin.R) * fail0
    i_c0, f_c0 = _cells(gc, sample.c_x)
    i_t0, f_t0 = _cells(gt, sample.T)
    i00, f00c = gc.locate(0.0)
    j00, f00t = gt.locate(0.0)

    V0 = np.zeros((gc.n, gt.n)) if init is None else np.array(init, dtype=float)
    if V0.shape != (gc.n, gt.n):
        raise ValueError("init table does not match the idle grid")
    args = (
        a_cont, np.ascontiguousarray(surv), np.ascontiguousarray(reset), i_c, f_c, i_t, f_t,
        np.ascontiguousarray(a_rep), np.ascontiguousarray(surv0), np.ascontiguousarray(reset0),
        i_c0, f_c0, i_t0, f_t0, co.cont, co.rep, co.disc, co.rej,
        int(i00), float(f00c), int(j00), float(f00t),
    )
    V, resid = _sweeps(V0, *args, cfg.tol, cfg.max_iter)
    if not np.all(np.isfinite(V)):
        raise ValueIterationError("value iteration produced non-finite values")
    # q-values and actions consistent with the returned table
    _, q_cont, q_rep, _ = _backup(V, *args)
    c_x_mean = float(sample.c_x.mean())
    base, slope, rej = _arrival_tables(model, cfg, V, c_x_mean, co.rej)
    q_acc = base[:, None] + slope[:, None] * cfg.c_rev.points[None, :, None, None]
    q_rej = rej[:, None, None, :]
    return PolicyTables(
        cfg=cfg,
        idle_value=V,
        q_continue=q_cont,
        q_replace=q_rep,
        replace=~_prefers_first(q_cont, q_rep),
        accept_base=base,
        accept_slope=slope,
        reject_value=rej,
        arrival_value=np.maximum(q_acc, q_rej),
        accept=_prefers_first(q_acc, q_rej),
        residuals=resid,
        converged=bool(resid.size and resid[-1] < cfg.tol),
        c_x_mean=c_x_mean,
        reject_factor=co.rej,
    )


def _arrival_tables(model, cfg, V, c_x_mean, rej_factor):
    """Accept-value coefficients on ``(c_deg, T, t)`` and reject values on ``(c_deg, t)``.

    On the grid the pre-rental degradation needed by Reject is not part of
    the state; it is approximated by ``c_deg`` minus the mean customer
    contribution, floored at 0. Zero durations are floored at ``f_floor``.
    """
    fin = model.fin
    cd, TT, tt = np.meshgrid(cfg.c_deg.points, np.maximum(cfg.T.points, cfg.f_floor), cfg.t.points, indexing="ij")
    rev, fail, surv, reset = rental_coefficients(model, cfg, cd, tt, TT)
    v00 = _bilinear(V, cfg.idle_c, cfg.idle_t, 0.0, 0.0)
    v_next = _bilinear(V, cfg.idle_c, cfg.idle_t, cd, tt + TT)
    base = -(fin.F + fin.R) * fail + surv * v_next + reset * v00
    slope = rev + fail
    c2, t2 = np.meshgrid(cfg.c_deg.points, cfg.t.points, indexing="ij")
    rej = rej_factor * _bilinear(V, cfg.idle_c, cfg.idle_t, np.maximum(c2 - c_x_mean, 0.0), t2)
    return base, slope, rej


# --- decisions over real states ---------------------------------------------------------


def decide_arrival(tables: PolicyTables, model: MDPModel, cond: RobotCondition, x, T: float) -> Action:
    """Greedy arrival action at the exact projected state of a customer."""
    c_c = dot(model.theta, cond.X)
    c_deg = c_c + dot(model.theta, x)
    V = tables.idle_value
    q_rej = tables.reject_factor * float(_bilinear(V, tables.cfg.idle_c, tables.cfg.idle_t, c_c, cond.t_age))
    q_acc = float(_accept_value(model, tables.cfg, V, c_deg, model.price(x), float(T), cond.t_age))
    return Action.ACCEPT if _prefers_first(q_acc, q_rej) else Action.REJECT


def decide_idle(tables: PolicyTables, model: MDPModel, cond: RobotCondition) -> Action:
    """Greedy idle action: Replace iff its value beats the interpolated Continue value."""
    s = project_idle_state(model.theta, cond)
    q_cont = float(_bilinear(tables.q_continue, tables.cfg.idle_c, tables.cfg.idle_t, s.c_c, s.t))
    return Action.CONTINUE if _prefers_first(q_cont, tables.q_replace) else Action.REPLACE


def epsilon_greedy(action: Action, eps: float, rng: np.random.Generator) -> Action:
    """With probability ``eps`` replace ``action`` by a uniform draw from its two-action phase."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0 and rng.random() < eps:
        return action if rng.random() < 0.5 else action.alternative
    return action


def replacement_boundary(tables: PolicyTables):
    """Smallest ``c_c`` grid value with a Replace action, per age.

    Returns ``(t_values, thresholds)`` restricted to ages where some Replace
    action exists; both are empty for an all-Continue table.
    """
    rep = np.asarray(tables.replace, dtype=bool)
    has = rep.any(axis=0)
    first = np.argmax(rep, axis=0)
    return tables.cfg.idle_t.points[has], tables.cfg.idle_c.points[first[has]]


# --- estimator wrapper ------------------------------------------------------------------


class ValueIterationPolicy(BaseEstimator):
    """Greedy policy from value iteration on a (true or estimated) model.

    Parameters
    ----------
    solver : SolverConfig or None
    fin : FinancialParams or None
    dist : CustomerDistribution or None
    price_margin : float
        Posted price is ``u @ x - price_margin`` (floored at 0).

    Attributes
    ----------
    model_ : MDPModel
    tables_ : PolicyTables
    """

    def __init__(self, solver=None, fin=None, dist=None, price_margin=0.0):
        self.solver = solver
        self.fin = fin
        self.dist = dist
        self.price_margin = price_margin

    def fit(self, truth: GroundTruth, y=None, init=None):
        self.model_ = MDPModel(truth, self.fin or FinancialParams(), self.dist, self.price_margin)
        warm = None
        if init is not None:
            warm = init.idle_value if isinstance(init, PolicyTables) else init
        self.tables_ = value_iteration(self.model_, self.solver or SolverConfig(), warm)
        return self

    def price(self, x) -> float:
        check_is_fitted(self, "model_")
        return self.model_.price(x)

    def arrival_action(self, cond: RobotCondition, x, T: float) -> Action:
        check_is_fitted(self, "tables_")
        return decide_arrival(self.tables_, self.model_, cond, x, T)

    def idle_action(self, cond: RobotCondition) -> Action:
        check_is_fitted(self, "tables_")
        return decide_idle(self.tables_, self.model_, cond)


# --- CSV export ------------------------------------------------------------------------------

ARRIVAL_COLUMNS = ("c_deg", "c_rev", "T", "t", "value", "action")
SLICE_COLUMNS = ("percentile", "c_rev", "c_deg", "T", "t", "value", "action")
IDLE_COLUMNS = ("c_c", "t", "value", "q_continue", "q_replace", "action")
BOUNDARY_COLUMNS = ("t", "threshold")


def _g(v) -> str:
    return f"{float(v):.17g}"


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_arrival_csv(path, tables: PolicyTables) -> None:
    cfg = tables.cfg
    T_pts = np.maximum(cfg.T.points, cfg.f_floor)
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(ARRIVAL_COLUMNS)
        for i, c in enumerate(cfg.c_deg.points):
            for j, r in enumerate(cfg.c_rev.points):
                for k, T in enumerate(T_pts):
                    for m, t in enumerate(cfg.t.points):
                        a = Action.ACCEPT if tables.accept[i, j, k, m] else Action.REJECT
                        w.writerow([_g(c), _g(r), _g(T), _g(t), _g(tables.arrival_value[i, j, k, m]), a.value])


def write_arrival_slices_csv(path, tables: PolicyTables, revenues, percentiles=(10, 50, 90)) -> None:
    """Accept/Reject regions on the ``(c_deg, T, t)`` grid at revenue percentiles."""
    cfg = tables.cfg
    T_pts = np.maximum(cfg.T.points, cfg.f_floor)
    levels = np.percentile(np.asarray(revenues, dtype=float), percentiles)
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(SLICE_COLUMNS)
        for pct, level in zip(percentiles, levels):
            acc, val = tables.arrival_slice(level)
            for i, c in enumerate(cfg.c_deg.points):
                for k, T in enumerate(T_pts):
                    for m, t in enumerate(cfg.t.points):
                        a = Action.ACCEPT if acc[i, k, m] else Action.REJECT
                        w.writerow([pct, _g(level), _g(c), _g(T), _g(t), _g(val[i, k, m]), a.value])


def write_idle_csv(path, tables: PolicyTables) -> None:
    cfg = tables.cfg
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(IDLE_COLUMNS)
        for i, c in enumerate(cfg.idle_c.points):
            for j, t in enumerate(cfg.idle_t.points):
                a = Action.REPLACE if tables.replace[i, j] else Action.CONTINUE
                w.writerow([_g(c), _g(t), _g(tables.idle_value[i, j]), _g(tables.q_continue[i, j]),
                            _g(tables.q_replace), a.value])


def write_boundary_csv(path, tables: PolicyTables) -> None:
    """One row per age; the threshold is empty where the robot is never replaced."""
    cfg = tables.cfg
    t_has, thr = replacement_boundary(tables)
    lookup = dict(zip(t_has.tolist(), thr.tolist()))
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(BOUNDARY_COLUMNS)
        for t in cfg.idle_t.points.tolist():
            w.writerow([_g(t), _g(lookup[t]) if t in lookup else ""])
