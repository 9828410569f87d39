"""Shared domain types, configuration objects and small vector helpers."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

NORM_SLACK = 1e-12


class ValidationError(ValueError):
    """Raised when a value object is constructed with invalid fields.

    The ``field`` attribute names the offending field so that config loaders
    can report a precise path.
    """

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def _vector(name: str, value, *, nonneg: bool = True) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValidationError(name, "must be a nonempty vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(name, "must be finite")
    if nonneg and np.any(arr < 0):
        raise ValidationError(name, "coordinates must be non-negative")
    arr.setflags(write=False)
    return arr


def dot(a, b) -> float:
    """Inner product of two equal-length vectors."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(a @ b)


def context_vector(x) -> np.ndarray:
    """Validate a customer context: non-negative with Euclidean norm at most one."""
    arr = _vector("x", x)
    if np.linalg.norm(arr) > 1 + NORM_SLACK:
        raise ValidationError("x", "Euclidean norm must be <= 1")
    return arr


def utility_vector(u) -> np.ndarray:
    arr = _vector("u", u)
    if np.linalg.norm(arr) > 1 + NORM_SLACK:
        raise ValidationError("u", "Euclidean norm must be <= 1")
    return arr


def degradation_vector(theta) -> np.ndarray:
    arr = _vector("theta", theta)
    if np.max(arr) > 1 + NORM_SLACK:
        raise ValidationError("theta", "max-norm must be <= 1")
    return arr


class Phase(enum.IntEnum):
    ARRIVAL = 0
    IDLE = 1


class Action(str, enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    CONTINUE = "continue"
    REPLACE = "replace"

    @property
    def alternative(self) -> "Action":
        return _ALTERNATIVE[self]


_ALTERNATIVE = {
    Action.ACCEPT: Action.REJECT,
    Action.REJECT: Action.ACCEPT,
    Action.CONTINUE: Action.REPLACE,
    Action.REPLACE: Action.CONTINUE,
}


@dataclass(frozen=True)
class CustomerArrival:
    x: np.ndarray
    T: float
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "x", context_vector(self.x))
        if not self.T > 0:
            raise ValidationError("T", "rental duration must be > 0")
        if not self.tau > 0:
            raise ValidationError("tau", "interarrival time must be > 0")


@dataclass(frozen=True)
class RobotCondition:
    """Cumulative context ``X`` and operational age since the last replacement."""

    X: np.ndarray
    t_age: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "X", _vector("X", self.X))
        if not (np.isfinite(self.t_age) and self.t_age >= 0):
            raise ValidationError("t_age", "must be >= 0")

    @classmethod
    def new(cls, d: int) -> "RobotCondition":
        return cls(np.zeros(d), 0.0)

    def after_rental(self, x, T: float) -> "RobotCondition":
        return RobotCondition(self.X + np.asarray(x, dtype=float), self.t_age + T)

    @property
    def is_new(self) -> bool:
        return self.t_age == 0.0 and not np.any(self.X)


@dataclass(frozen=True)
class PhaseState:
    condition: RobotCondition
    phi: Phase = Phase.ARRIVAL


@dataclass(frozen=True)
class FinancialParams:
    h: float = 0.02
    F: float = 0.75
    R: float = 1.5

    def __post_init__(self):
        for name in ("h", "F", "R"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(name, "must be a finite value >= 0")


@dataclass(frozen=True)
class BaselineHazard:
    """Baseline hazard, either a constant rate or a piecewise-linear table.

    Outside the tabulated age range the rate is held at the nearest end value.
    """

    rate: float | None = None
    ages: np.ndarray | None = None
    rates: np.ndarray | None = None

    def __post_init__(self):
        if self.rate is not None:
            if self.ages is not None or self.rates is not None:
                raise ValidationError("baseline", "give either rate or a table, not both")
            if not (np.isfinite(self.rate) and self.rate >= 0):
                raise ValidationError("baseline.rate", "must be >= 0")
            return
        if self.ages is None or self.rates is None:
            raise ValidationError("baseline", "needs a constant rate or an (ages, rates) table")
        ages = np.array(self.ages, dtype=float).reshape(-1)
        rates = np.array(self.rates, dtype=float).reshape(-1)
        if ages.size < 2 or ages.shape != rates.shape:
            raise ValidationError("baseline.ages", "need >= 2 ages matching rates")
        if np.any(np.diff(ages) <= 0) or ages[0] < 0:
            raise ValidationError("baseline.ages", "must be strictly increasing and >= 0")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise ValidationError("baseline.rates", "must be finite and >= 0")
        seg = 0.5 * (rates[1:] + rates[:-1]) * np.diff(ages)
        knots_cum = np.concatenate([[rates[0] * ages[0]], rates[0] * ages[0] + np.cumsum(seg)])
        for arr in (ages, rates, knots_cum):
            arr.setflags(write=False)
        object.__setattr__(self, "ages", ages)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "_knots_cum", knots_cum)

    @classmethod
    def constant(cls, rate: float) -> "BaselineHazard":
        return cls(rate=float(rate))

    @classmethod
    def table(cls, ages, rates) -> "BaselineHazard":
        return cls(ages=ages, rates=rates)

    @property
    def is_constant(self) -> bool:
        return self.rate is not None

    @property
    def knots_cumulative(self) -> np.ndarray:
        """Cumulative hazard at the table ages (table form only)."""
        return self._knots_cum

    def rate_at(self, t):
        t = np.asarray(t, dtype=float)
        if self.is_constant:
            return np.full_like(t, self.rate) if t.ndim else self.rate
        out = np.interp(t, self.ages, self.rates)
        return out if t.ndim else float(out)

    def cumulative(self, t):
        """Cumulative baseline hazard from age 0 to ``t`` (exact for the linear table)."""
        t = np.asarray(t, dtype=float)
        if self.is_constant:
            out = self.rate * t
            return out if t.ndim else float(out)
        ages, rates, cum = self.ages, self.rates, self._knots_cum
        i = np.clip(np.searchsorted(ages, t, side="right") - 1, 0, ages.size - 2)
        a0 = ages[i]
        r0 = rates[i]
        slope = (rates[i + 1] - r0) / (ages[i + 1] - a0)
        dt = np.clip(t - a0, 0.0, ages[i + 1] - a0)
        inside = cum[i] + r0 * dt + 0.5 * slope * dt * dt
        out = np.where(
            t < ages[0],
            rates[0] * t,
            np.where(t > ages[-1], cum[-1] + rates[-1] * (t - ages[-1]), inside),
        )
        return out if t.ndim else float(out)

    def to_dict(self) -> dict:
        if self.is_constant:
            return {"kind": "constant", "rate": self.rate}
        return {"kind": "table", "ages": self.ages.tolist(), "rates": self.rates.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BaselineHazard":
        kind = data.get("kind", "constant")
        if kind == "constant":
            return cls.constant(_require(data, "rate", "baseline"))
        if kind == "table":
            return cls.table(_require(data, "ages", "baseline"), _require(data, "rates", "baseline"))
        raise ValidationError("baseline.kind", f"unknown kind {kind!r}")


@dataclass(frozen=True)
class GroundTruth:
    """Parameters ``(u, theta, baseline)``; also used for estimated models."""

    u: np.ndarray
    theta: np.ndarray
    baseline: BaselineHazard

    def __post_init__(self):
        object.__setattr__(self, "u", utility_vector(self.u))
        object.__setattr__(self, "theta", degradation_vector(self.theta))
        if self.u.shape != self.theta.shape:
            raise ValidationError("theta", "must have the same dimension as u")

    @property
    def d(self) -> int:
        return self.u.size

    def to_dict(self) -> dict:
        return {"u": self.u.tolist(), "theta": self.theta.tolist(), "baseline": self.baseline.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(
            u=_require(data, "u", "truth"),
            theta=_require(data, "theta", "truth"),
            baseline=BaselineHazard.from_dict(_require(data, "baseline", "truth")),
        )


@dataclass(frozen=True)
class LearningConfig:
    eps_u: float = 1e-4
    n_samples: int = 2000
    burn_in: int | None = None  # None -> 500 * d**2
    thin: int = 5
    target_accept: float = 0.01
    eps_p: float = 1e-2
    price_margin: float = 1e-2
    K: int = 100
    eps0: float = 0.10
    decay: float = 0.95
    min_failures: int = 2
    width_factor: float = 10.0
    explore_idle: bool = False  # epsilon-greedy on arrival decisions only

    def __post_init__(self):
        for name in ("eps_u", "n_samples", "thin", "target_accept", "K", "width_factor", "min_failures"):
            if not getattr(self, name) > 0:
                raise ValidationError(name, "must be positive")
        if self.burn_in is not None and self.burn_in < 0:
            raise ValidationError("burn_in", "must be >= 0")
        if self.eps_p < 0 or self.price_margin < 0:
            raise ValidationError("eps_p", "price discounts must be >= 0")
        if not 0 <= self.eps0 <= 1:
            raise ValidationError("eps0", "must lie in [0, 1]")
        if not 0 < self.decay <= 1:
            raise ValidationError("decay", "must lie in (0, 1]")

    def burn_in_for(self, d: int) -> int:
        return 500 * d * d if self.burn_in is None else self.burn_in


@dataclass(frozen=True)
class Grid:
    """Uniform 1-D grid; queries outside ``[lo, hi]`` clamp to the boundary."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError("grid", f"need lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.n) != self.n or self.n < 2:
            raise ValidationError("grid", "need at least 2 points")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, int(self.n))

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def locate(self, q):
        """Return ``(i, frac)`` with ``q ~ points[i] + frac * step`` after clamping."""
        pos = (np.clip(q, self.lo, self.hi) - self.lo) / self.step
        i = np.minimum(np.floor(pos).astype(np.int64), self.n - 2)
        return i, pos - i

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(self.lo, self.hi, (self.n - 1) * factor + 1)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n": self.n}


def _grid_field(lo, hi, n):
    return field(default_factory=lambda: Grid(lo, hi, n))


@dataclass(frozen=True)
class SolverConfig:
    """Value-iteration settings.

    With ``discounting="time"`` the value of a transition is its normalized
    reward accrued as a rate over the elapsed time, and ``gamma`` is the
    discount per unit of time. With ``"epoch"`` each transition is one
    decision epoch: the normalized reward is collected at once and ``gamma``
    discounts per epoch.
    """

    gamma: float = 0.999
    discounting: str = "time"
    c_deg: Grid = _grid_field(0.0, 8.0, 33)
    c_rev: Grid = _grid_field(0.0, 1.0, 17)
    T: Grid = _grid_field(0.0, 50.0, 17)
    t: Grid = _grid_field(0.0, 400.0, 17)
    idle_c: Grid = _grid_field(0.0, 8.0, 33)
    idle_t: Grid = _grid_field(0.0, 400.0, 17)
    mc_samples: int = 512
    mc_seed: int = 20240601
    quad_points: int = 64
    f_floor: float = 1e-3
    tol: float = 1e-7
    max_iter: int = 20000

    def __post_init__(self):
        if self.discounting not in ("time", "epoch"):
            raise ValidationError("discounting", "must be 'time' or 'epoch'")
        # epoch discounting allows gamma = 0, the myopic one-step policy
        lo_ok = self.gamma >= 0 if self.discounting == "epoch" else self.gamma > 0
        if not (lo_ok and self.gamma < 1):
            raise ValidationError("gamma", "must lie in (0, 1), or [0, 1) with epoch discounting")
        for name in ("mc_samples", "quad_points", "max_iter"):
            if not getattr(self, name) >= 1:
                raise ValidationError(name, "must be >= 1")
        if not self.tol > 0 or not self.f_floor > 0:
            raise ValidationError("tol", "tol and f_floor must be positive")


@dataclass(frozen=True)
class CustomerDistribution:
    d: int = 4
    mean_tau: float = 5.0
    mean_T: float = 10.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ValidationError("d", "dimension must be a positive integer")
        if not (self.mean_tau > 0 and self.mean_T > 0):
            raise ValidationError("mean_tau", "means must be > 0")


# --- (de)serialization -------------------------------------------------------


def _require(data: dict, key: str, where: str) -> Any:
    if not isinstance(data, dict) or key not in data:
        raise ValidationError(f"{where}.{key}", "missing required field")
    return data[key]


def config_to_dict(obj) -> dict:
    """Plain-JSON form of a config dataclass (nested grids become dicts)."""
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = v.to_dict() if isinstance(v, Grid) else v
    return out


def config_from_dict(cls, data: dict | None, where: str):
    """Build ``cls`` from a dict, naming the offending field on failure."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ValidationError(where, "must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValidationError(f"{where}.{key}", "unknown field")
        if known[key].type in ("Grid", Grid) or isinstance(getattr(cls(), key, None), Grid):
            try:
                value = Grid(**value)
            except (TypeError, ValidationError) as exc:
                raise ValidationError(f"{where}.{key}", str(exc)) from None
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ValidationError(f"{where}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ValidationError(where, str(exc)) from None
