"""Cox proportional-hazards estimation of robot degradation.

Rentals are left-truncated at the robot age when they start, so a rental is
at risk for ages in ``(entry_age, exit_age]``. Tied failure ages use the
grouped (Breslow) partial likelihood.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import BaselineHazard

RATE_FLOOR = 1e-12


class InsufficientFailuresError(ValueError):
    """Raised when a fit needs more observed failures than the data contain."""


@dataclass(frozen=True)
class RentalRecord:
    z: np.ndarray
    entry_age: float
    exit_age: float
    failed: bool

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        if not self.exit_age > self.entry_age:
            raise ValueError("exit_age must exceed entry_age")
        if self.entry_age < 0:
            raise ValueError("entry_age must be >= 0")


def as_arrays(records):
    """Normalize records to arrays ``(Z, entry, exit, failed)``.

    Accepts a sequence of :class:`RentalRecord` or a 4-tuple of arrays.
    """
    if isinstance(records, tuple) and len(records) == 4 and not isinstance(records[0], RentalRecord):
        Z, entry, exit_, failed = records
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return Z, np.asarray(entry, dtype=float), np.asarray(exit_, dtype=float), np.asarray(failed, dtype=bool)
    records = list(records)
    if not records:
        raise ValueError("no rental records")
    Z = np.vstack([r.z for r in records])
    entry = np.array([r.entry_age for r in records])
    exit_ = np.array([r.exit_age for r in records])
    failed = np.array([r.failed for r in records], dtype=bool)
    return Z, entry, exit_, failed


def risk_set(records, t: float) -> np.ndarray:
    """Indices of rentals at risk at age ``t``: ``entry < t <= exit``."""
    _, entry, exit_, _ = as_arrays(records)
    return np.flatnonzero((entry < t) & (t <= exit_))


class _RiskSums:
    """Suffix sums that give risk-set totals at every failure age in O(n log n)."""

    def __init__(self, Z, entry, exit_, failed):
        self.Z = Z
        self.fail_ages, inverse, self.counts = np.unique(exit_[failed], return_inverse=True, return_counts=True)
        if self.fail_ages.size == 0:
            raise InsufficientFailuresError("partial likelihood needs at least one failure")
        nf, d = self.fail_ages.size, Z.shape[1]
        self.z_fail = np.zeros((nf, d))
        np.add.at(self.z_fail, inverse, Z[failed])
        self.fail_idx = np.flatnonzero(failed)
        self.fail_group = inverse
        self.exit_order = np.argsort(exit_, kind="stable")
        self.entry_order = np.argsort(entry, kind="stable")
        self.exit_pos = np.searchsorted(exit_[self.exit_order], self.fail_ages, side="left")
        self.entry_pos = np.searchsorted(entry[self.entry_order], self.fail_ages, side="left")

    def _at_risk(self, values, order, pos):
        suffix = np.concatenate([np.cumsum(values[order][::-1], axis=0)[::-1], np.zeros((1,) + values.shape[1:])])
        return suffix[pos]

    def sums(self, eta, with_first: bool = True):
        shift = eta.max()
        w = np.exp(eta - shift)
        s0 = self._at_risk(w, self.exit_order, self.exit_pos) - self._at_risk(w, self.entry_order, self.entry_pos)
        s0 = np.maximum(s0, np.finfo(float).tiny)
        if not with_first:
            return shift, s0, None
        wz = w[:, None] * self.Z
        s1 = self._at_risk(wz, self.exit_order, self.exit_pos) - self._at_risk(wz, self.entry_order, self.entry_pos)
        return shift, s0, s1


def _loglik_grad(theta, rs: _RiskSums, need_grad=True):
    eta = rs.Z @ theta
    shift, s0, s1 = rs.sums(eta, need_grad)
    log_s0 = shift + np.log(s0)
    ll = float(np.sum(eta[rs.fail_idx]) - rs.counts @ log_s0)
    if not need_grad:
        return ll, None
    grad = rs.z_fail.sum(axis=0) - (rs.counts / s0) @ s1
    return ll, grad


def _hessian(theta, rs: _RiskSums) -> np.ndarray:
    eta = rs.Z @ theta
    shift, s0, s1 = rs.sums(eta)
    w = np.exp(eta - shift)
    wzz = w[:, None, None] * rs.Z[:, :, None] * rs.Z[:, None, :]
    s2 = rs._at_risk(wzz, rs.exit_order, rs.exit_pos) - rs._at_risk(wzz, rs.entry_order, rs.entry_pos)
    mean = s1 / s0[:, None]
    cov = s2 / s0[:, None, None] - mean[:, :, None] * mean[:, None, :]
    return -np.einsum("t,tij->ij", rs.counts, cov)


def cox_partial_loglik(theta, records) -> float:
    rs = _RiskSums(*as_arrays(records))
    return _loglik_grad(np.asarray(theta, dtype=float), rs, need_grad=False)[0]


def cox_gradient(theta, records) -> np.ndarray:
    rs = _RiskSums(*as_arrays(records))
    return _loglik_grad(np.asarray(theta, dtype=float), rs)[1]


def fit_theta(records, *, min_failures: int = 1, upper: float | None = 1.0, tol: float = 1e-6,
              max_iter: int = 10_000, init=None) -> np.ndarray:
    """Maximize the partial likelihood over ``0 <= theta <= upper``.

    A box-constrained quasi-Newton solve (L-BFGS-B) is followed, while the
    projected-gradient norm is above ``tol``, by projected Newton steps on
    the free coordinates with Armijo backtracking along the projection arc.
    The start is ``theta = 0`` unless ``init`` is given; the returned value
    never has a lower likelihood than the start.
    """
    arrays = as_arrays(records)
    n_fail = int(arrays[3].sum())
    if n_fail < max(min_failures, 1):
        raise InsufficientFailuresError(f"need at least {max(min_failures, 1)} failures, have {n_fail}")
    rs = _RiskSums(*arrays)
    d = arrays[0].shape[1]
    hi = np.inf if upper is None else upper

    def proj(v):
        return np.clip(v, 0.0, hi)

    def pg_norm(theta, g):
        return np.linalg.norm(proj(theta + g) - theta)

    theta0 = np.zeros(d) if init is None else proj(np.asarray(init, dtype=float).reshape(d))
    f0, g0 = _loglik_grad(theta0, rs)

    def neg(v):
        ll, g = _loglik_grad(v, rs)
        return -ll, -g

    res = minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=[(0.0, None if upper is None else upper)] * d,
                   options={"maxiter": max_iter, "gtol": tol * 1e-3, "ftol": 1e-15})
    theta, f, g = theta0, f0, g0
    if np.all(np.isfinite(res.x)):
        cand = proj(res.x)
        fc, gc = _loglik_grad(cand, rs)
        if fc >= f0:
            theta, f, g = cand, fc, gc

    # projected Newton polish on the free coordinates
    for _ in range(min(max_iter, 100)):
        if pg_norm(theta, g) < tol:
            break
        fixed = ((theta <= 0) & (g < 0)) | ((theta >= hi) & (g > 0))
        free = ~fixed
        H = _hessian(theta, rs)[np.ix_(free, free)]
        direction = np.zeros(d)
        try:
            direction[free] = np.linalg.solve(H - 1e-12 * np.eye(int(free.sum())), -g[free])
        except np.linalg.LinAlgError:
            direction[free] = g[free]
        if direction @ g <= 0:
            direction = np.where(free, g, 0.0)
        # near the optimum the change in f is at rounding level, so allow for noise
        noise = 64 * np.finfo(float).eps * max(abs(f), 1.0)
        step = 1.0
        while True:
            cand = proj(theta + step * direction)
            fc, gc = _loglik_grad(cand, rs)
            if fc >= f + 1e-4 * g @ (cand - theta) - noise:
                break
            step *= 0.5
            if step < 1e-12:
                return theta
        theta, f, g = cand, fc, gc
    return theta


@dataclass(frozen=True)
class BaselineEstimate:
    jump_ages: np.ndarray
    jump_sizes: np.ndarray
    max_age: float
    smoothed: BaselineHazard | None = None
    bandwidth: float | None = None

    @property
    def cum_hazard_values(self) -> np.ndarray:
        return np.cumsum(self.jump_sizes)

    def cumulative(self, t):
        """Step-function value of the cumulative baseline hazard at ``t``."""
        idx = np.searchsorted(self.jump_ages, np.asarray(t, dtype=float), side="right")
        cum = np.concatenate([[0.0], self.cum_hazard_values])
        return cum[idx]


def breslow_cumhaz(theta_hat, records) -> BaselineEstimate:
    """Breslow jumps ``|D(t)| / sum_{R(t)} exp(theta_hat @ z)`` at each failure age."""
    arrays = as_arrays(records)
    rs = _RiskSums(*arrays)
    shift, s0, _ = rs.sums(arrays[0] @ np.asarray(theta_hat, dtype=float), with_first=False)
    jumps = rs.counts * np.exp(-(shift + np.log(s0)))
    return BaselineEstimate(rs.fail_ages, jumps, float(arrays[2].max()))


def silverman_bandwidth(ages: np.ndarray, fallback: float) -> float:
    if ages.size < 2 or np.std(ages) == 0:
        return fallback
    return 1.06 * float(np.std(ages, ddof=1)) * ages.size ** (-0.2)


def smooth_hazard(estimate: BaselineEstimate, bandwidth: float | None = None, n_grid: int = 256) -> BaselineEstimate:
    """Gaussian-kernel smoothing of the Breslow increments into a hazard table.

    The table covers ``[0, max_age]``; kernel mass that falls outside is lost.
    """
    if estimate.jump_ages.size == 0:
        raise ValueError("need at least one jump to smooth")
    top = max(estimate.max_age, float(estimate.jump_ages.max()))
    if bandwidth is None:
        bandwidth = silverman_bandwidth(estimate.jump_ages, fallback=0.1 * max(top, 1.0))
    grid = np.linspace(0.0, top, n_grid)
    u = (grid[:, None] - estimate.jump_ages[None, :]) / bandwidth
    rates = (np.exp(-0.5 * u * u) @ estimate.jump_sizes) / (bandwidth * np.sqrt(2 * np.pi))
    table = BaselineHazard.table(grid, np.maximum(rates, RATE_FLOOR))
    return BaselineEstimate(estimate.jump_ages, estimate.jump_sizes, estimate.max_age, table, float(bandwidth))


class CoxDegradationEstimator(BaseEstimator):
    """Degradation model ``lambda0(age) * exp(theta @ z)`` fitted from rental outcomes.

    Parameters
    ----------
    upper : float or None
        Box bound on each coefficient; ``theta`` is always kept ``>= 0``.
    tol, max_iter : float, int
        Projected-gradient stopping rule.
    bandwidth : float or None
        Kernel bandwidth for the baseline hazard; ``None`` uses Silverman's rule.
    n_grid : int
        Number of ages in the smoothed hazard table.
    fixed_theta : array-like or None
        Skip the coefficient fit and use this vector (e.g. zeros).
    min_failures : int
        Minimum number of failures required by :meth:`fit`.

    Attributes
    ----------
    coef_ : ndarray of shape (d,)
    breslow_ : BaselineEstimate
    baseline_ : BaselineHazard
        Smoothed baseline hazard table.
    """

    def __init__(self, upper=1.0, tol=1e-6, max_iter=10_000, bandwidth=None, n_grid=256, fixed_theta=None,
                 min_failures=1):
        self.upper = upper
        self.tol = tol
        self.max_iter = max_iter
        self.bandwidth = bandwidth
        self.n_grid = n_grid
        self.fixed_theta = fixed_theta
        self.min_failures = min_failures

    def fit(self, Z, entry=None, exit=None, failed=None):
        """Fit from arrays, or from a sequence of :class:`RentalRecord` passed as ``Z``."""
        if entry is None:
            Z, entry, exit, failed = as_arrays(Z)
        Z = check_array(Z, ensure_min_samples=1)
        entry = np.asarray(entry, dtype=float)
        exit = np.asarray(exit, dtype=float)
        failed = np.asarray(failed, dtype=bool)
        if not (entry.shape == exit.shape == failed.shape == (Z.shape[0],)):
            raise ValueError("entry, exit and failed must have one value per row of Z")
        if np.any(exit <= entry) or np.any(entry < 0):
            raise ValueError("each record needs 0 <= entry_age < exit_age")
        n_fail = int(failed.sum())
        if n_fail < max(self.min_failures, 1):
            raise InsufficientFailuresError(f"need at least {max(self.min_failures, 1)} failures, have {n_fail}")
        data = (Z, entry, exit, failed)
        if self.fixed_theta is not None:
            self.coef_ = np.asarray(self.fixed_theta, dtype=float).reshape(Z.shape[1])
        else:
            self.coef_ = fit_theta(data, upper=self.upper, tol=self.tol, max_iter=self.max_iter)
        self.breslow_ = smooth_hazard(breslow_cumhaz(self.coef_, data), self.bandwidth, self.n_grid)
        self.baseline_ = self.breslow_.smoothed
        self.n_failures_ = n_fail
        self.n_features_in_ = Z.shape[1]
        return self

    def score(self, Z, entry=None, exit=None, failed=None) -> float:
        """Partial log-likelihood of the fitted coefficients on the given data."""
        check_is_fitted(self, "coef_")
        data = as_arrays(Z) if entry is None else (Z, entry, exit, failed)
        return cox_partial_loglik(self.coef_, data)

    def predict_failure_probability(self, z, age, duration):
        """Probability that a rental with covariate ``z`` started at ``age`` fails within ``duration``."""
        check_is_fitted(self, "coef_")
        lin = np.atleast_2d(np.asarray(z, dtype=float)) @ self.coef_
        age = np.asarray(age, dtype=float)
        exposure = np.exp(lin) * (self.baseline_.cumulative(age + duration) - self.baseline_.cumulative(age))
        return -np.expm1(-exposure)


RECORD_COLUMNS = ("entry_age", "exit_age", "failed")


def write_records_csv(path, records) -> None:
    Z, entry, exit_, failed = as_arrays(records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z_{i + 1}" for i in range(Z.shape[1])] + list(RECORD_COLUMNS))
        for z, a, b, f in zip(Z, entry, exit_, failed):
            w.writerow([f"{v:.17g}" for v in z] + [f"{a:.17g}", f"{b:.17g}", int(f)])


def read_records_csv(path) -> list[RentalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    zcols = [i for i, name in enumerate(header) if name.startswith("z_")]
    try:
        ia, ib, ifl = (header.index(c) for c in RECORD_COLUMNS)
    except ValueError:
        raise ValueError(f"{path}: header must contain z_1..z_d, entry_age, exit_age, failed") from None
    if not zcols:
        raise ValueError(f"{path}: no covariate columns z_1..z_d")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            out.append(RentalRecord(
                np.array([float(row[i]) for i in zcols]),
                float(row[ia]), float(row[ib]), bool(int(float(row[ifl]))),
            ))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise ValueError(f"{path}: no records")
    return out
