"""Utility-vector learning by multidimensional binary search (Projected Volume).

The uncertainty set is the unit ball intersected with the halfspaces implied
by past price responses. Directions along which the set has become thin are
frozen into ``small_dirs`` together with the interval the set occupies along
them; the remaining directions are explored by hit-and-run sampling of the
cylindrified set.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from .core import LearningConfig

CHORD_EPS = 1e-12
MAX_RETRIES = 100
BOUND_PAD = 0.1


class EmptySetError(RuntimeError):
    """The uncertainty set has (numerically) no interior left."""


@njit(cache=True)
def _hit_and_run_kernel(G, h, radius, start, n_samples, burn_in, thin, seed):
    np.random.seed(seed)
    k = start.size
    m = h.size
    x = start.copy()
    out = np.empty((n_samples, k))
    r2 = radius * radius
    kept = 0
    rejected = 0
    total = burn_in + n_samples * thin
    dvec = np.empty(k)
    for it in range(total):
        found = False
        tlo = 0.0
        thi = 0.0
        for _ in range(MAX_RETRIES):
            nrm = 0.0
            for j in range(k):
                dvec[j] = np.random.standard_normal()
                nrm += dvec[j] * dvec[j]
            nrm = np.sqrt(nrm)
            b = 0.0
            xx = 0.0
            for j in range(k):
                dvec[j] /= nrm
                b += x[j] * dvec[j]
                xx += x[j] * x[j]
            disc = b * b - (xx - r2)
            if disc <= 0.0:
                continue
            sq = np.sqrt(disc)
            tlo = -b - sq
            thi = -b + sq
            for i in range(m):
                gd = 0.0
                gx = 0.0
                for j in range(k):
                    gd += G[i, j] * dvec[j]
                    gx += G[i, j] * x[j]
                slack = h[i] - gx
                if gd > 0.0:
                    lim = slack / gd
                    if lim > tlo:
                        tlo = lim
                elif gd < 0.0:
                    lim = slack / gd
                    if lim < thi:
                        thi = lim
            if thi - tlo > CHORD_EPS:
                found = True
                break
        if not found:
            return out[:kept], -1, rejected
        t = tlo + np.random.random() * (thi - tlo)
        ok = True
        yy = 0.0
        for j in range(k):
            yy += (x[j] + t * dvec[j]) ** 2
        if yy > r2 * (1.0 + 1e-12):
            ok = False
        for i in range(m):
            gy = 0.0
            for j in range(k):
                gy += G[i, j] * (x[j] + t * dvec[j])
            if gy < h[i] - 1e-12 * (1.0 + abs(h[i])):
                ok = False
        if ok:
            for j in range(k):
                x[j] += t * dvec[j]
        else:
            rejected += 1
        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            for j in range(k):
                out[kept, j] = x[j]
            kept += 1
    return out, 0, rejected


def hit_and_run(G, h, radius, start, n_samples, burn_in, rng, thin=1):
    """Hit-and-run on ``{w : |w| <= radius, G w >= h}`` started at ``start``.

    Chord endpoints are exact (quadratic for the ball, linear per halfspace).
    Every proposed move is re-checked against all constraints; a move that
    fails the check is dropped and the chain stays put.
    """
    G = np.ascontiguousarray(G, dtype=float).reshape(-1, np.size(start))
    h = np.ascontiguousarray(h, dtype=float).reshape(-1)
    start = np.ascontiguousarray(start, dtype=float)
    seed = int(rng.integers(0, 2**31 - 1))
    out, status, _ = _hit_and_run_kernel(G, h, float(radius), start, int(n_samples), int(burn_in), int(thin), seed)
    if status != 0:
        raise EmptySetError(f"no chord longer than {CHORD_EPS} after {MAX_RETRIES} directions")
    return out


@dataclass(frozen=True)
class UncertaintySet:
    """Unit ball intersected with halfspaces ``sense * (normal @ s) >= sense * offset``.

    ``small_dirs`` holds orthonormal frozen directions (rows) and
    ``small_bounds`` the interval ``[lo, hi]`` of ``s @ v`` along each of them.
    ``anchor`` is a strictly feasible point of the cylindrified set.
    """

    normals: np.ndarray
    offsets: np.ndarray
    senses: np.ndarray
    small_dirs: np.ndarray
    small_bounds: np.ndarray
    anchor: np.ndarray

    @classmethod
    def unit_ball(cls, d: int) -> "UncertaintySet":
        return cls(np.zeros((0, d)), np.zeros(0), np.zeros(0, dtype=int), np.zeros((0, d)), np.zeros((0, 2)), np.zeros(d))

    @property
    def d(self) -> int:
        return self.anchor.size

    @property
    def G(self) -> np.ndarray:
        return self.senses[:, None] * self.normals

    @property
    def h(self) -> np.ndarray:
        return self.senses * self.offsets

    @property
    def halfspaces(self):
        return [(a, float(b), ">=" if s > 0 else "<=") for a, b, s in zip(self.normals, self.offsets, self.senses)]

    def with_halfspace(self, normal, offset: float, sense: int) -> "UncertaintySet":
        return replace(
            self,
            normals=np.vstack([self.normals, np.asarray(normal, dtype=float)]),
            offsets=np.append(self.offsets, float(offset)),
            senses=np.append(self.senses, int(sense)),
        )

    def violations(self, s, tol: float = 0.0) -> int:
        """Number of constraints (ball included) that ``s`` violates by more than ``tol``."""
        s = np.asarray(s, dtype=float)
        n = int(np.sum(self.G @ s < self.h - tol)) if self.offsets.size else 0
        return n + int(s @ s > 1 + tol)

    def contains(self, s, tol: float = 0.0) -> bool:
        return self.violations(s, tol) == 0


def _complement(V: np.ndarray, d: int) -> np.ndarray:
    """Orthonormal rows spanning the orthogonal complement of the rows of ``V``."""
    if V.shape[0] == 0:
        return np.eye(d)
    if V.shape[0] >= d:
        return np.zeros((0, d))
    q, _ = np.linalg.qr(np.vstack([V, np.eye(d)]).T)
    return q[:, V.shape[0]:d].T


def cylindrify(S: UncertaintySet, slack: float = 1.0) -> UncertaintySet:
    """Expand ``S`` along its small-width directions.

    Each normal is projected onto the complement of ``span(small_dirs)``.
    With ``slack=1`` its offset is lowered by the largest value the dropped
    component can take over the recorded intervals, so the result contains
    ``S``. ``slack=0`` cuts through the interval midpoints instead; the
    learner samples that slice because the full slack is as large as the
    remaining widths and stalls the search.
    """
    if S.small_dirs.shape[0] == 0:
        return S
    G, h = S.G, S.h
    V = S.small_dirs
    gv = G @ V.T
    mid = S.small_bounds.mean(axis=1)
    half = 0.5 * (S.small_bounds[:, 1] - S.small_bounds[:, 0])
    Gc = G - gv @ V
    hc = h - gv @ mid - slack * (np.abs(gv) @ half)
    keep = np.linalg.norm(Gc, axis=1) > 1e-12
    return replace(S, normals=Gc[keep], offsets=hc[keep], senses=np.ones(int(keep.sum()), dtype=int))


@dataclass(frozen=True)
class _Section:
    """The cylindrified set restricted to ``s = base + U.T @ w``."""

    U: np.ndarray
    base: np.ndarray
    G: np.ndarray
    h: np.ndarray
    radius: float

    def lift(self, W):
        return self.base + np.atleast_2d(W) @ self.U

    def project(self, s):
        return (np.atleast_2d(s) - self.base) @ self.U.T


def _section(S: UncertaintySet, slack: float = 0.0) -> _Section:
    C = cylindrify(S, slack)
    U = _complement(S.small_dirs, S.d)
    base = S.small_bounds.mean(axis=1) @ S.small_dirs if S.small_dirs.shape[0] else np.zeros(S.d)
    radius = float(np.sqrt(max(1.0 - base @ base, 0.0)))
    return _Section(U, base, C.G @ U.T, C.h, radius)


def _interior_point(sec: _Section, candidates: np.ndarray) -> np.ndarray:
    """Deepest strictly feasible candidate, else a Chebyshev-style center."""
    k = sec.U.shape[0]
    if k == 0:
        return np.zeros(0)
    norms = np.linalg.norm(sec.G, axis=1)
    W = np.atleast_2d(candidates).reshape(-1, k)

    def depth(W):
        lin = (W @ sec.G.T - sec.h) / norms if sec.h.size else np.full((W.shape[0], 1), np.inf)
        ball = sec.radius - np.linalg.norm(W, axis=1)
        return np.minimum(lin.min(axis=1), ball)

    if W.shape[0]:
        dep = depth(W)
        best = int(np.argmax(dep))
        if dep[best] > 0:
            return W[best]
        w0 = W[best]
    else:
        w0 = np.zeros(k)
    cons = [
        {"type": "ineq", "fun": lambda z: sec.G @ z[:k] - z[k] * norms - sec.h},
        {"type": "ineq", "fun": lambda z: sec.radius - np.sqrt(z[:k] @ z[:k] + 1e-300) - z[k]},
    ]
    res = minimize(lambda z: -z[k], np.append(w0, 0.0), method="SLSQP", constraints=cons,
                   options={"ftol": 1e-14, "maxiter": 500})
    w = res.x[:k]
    if depth(w[None])[0] <= 1e-13:
        raise EmptySetError("cut left the uncertainty set without interior")
    return w


def _sample_section(sec: _Section, start_w, n_samples, burn_in, thin, rng) -> np.ndarray:
    if sec.U.shape[0] == 0:
        return np.broadcast_to(sec.base, (n_samples, sec.base.size)).copy()
    W = hit_and_run(sec.G, sec.h, sec.radius, start_w, n_samples, burn_in, rng, thin)
    return sec.lift(W)


def hit_and_run_sample(S: UncertaintySet, n_samples: int, burn_in: int, rng, thin: int = 1) -> np.ndarray:
    """Uniform-ish samples of ``S`` (ball and every halfspace), started at the anchor."""
    return hit_and_run(S.G, S.h, 1.0, S.anchor, n_samples, burn_in, rng, thin)


def cloud(S: UncertaintySet, cfg: LearningConfig, rng) -> np.ndarray:
    """Hit-and-run cloud of the cylindrified set, in full coordinates."""
    sec = _section(S)
    start = _interior_point(sec, sec.project(S.anchor))
    return _sample_section(sec, start, cfg.n_samples, cfg.burn_in_for(S.d), cfg.thin, rng)


def approx_centroid(S: UncertaintySet, cfg: LearningConfig, rng) -> np.ndarray:
    return cloud(S, cfg, rng).mean(axis=0)


def directed_diameter(samples: np.ndarray, direction) -> float:
    """Spread ``max - min`` of the sample cloud along a unit direction."""
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must have unit norm")
    proj = np.atleast_2d(samples) @ direction
    return float(proj.max() - proj.min())


def propose_price(centroid, x) -> float:
    return max(0.0, float(np.dot(centroid, x)))


def phase1_converged(samples: np.ndarray, x, eps_u: float) -> bool:
    nx = np.linalg.norm(x)
    if nx == 0:
        raise ValueError("context vector must be nonzero")
    return directed_diameter(samples, np.asarray(x) / nx) < eps_u


def _freeze_small_directions(S: UncertaintySet, pts: np.ndarray, cfg: LearningConfig, rng):
    """Move thin directions of the sample cloud into ``small_dirs``; resample after each move."""
    threshold = cfg.width_factor * cfg.eps_u
    while S.small_dirs.shape[0] < S.d:
        sec = _section(S)
        W = sec.project(pts)
        if W.shape[1] == 1:
            e = np.ones(1)
        else:
            _, vecs = np.linalg.eigh(np.cov(W, rowvar=False))
            e = vecs[:, 0]
        proj = W @ e
        width = proj.max() - proj.min()
        if width >= threshold:
            break
        pad = BOUND_PAD * width
        S = replace(
            S,
            small_dirs=np.vstack([S.small_dirs, e @ sec.U]),
            small_bounds=np.vstack([S.small_bounds, [proj.min() - pad, proj.max() + pad]]),
        )
        sec = _section(S)
        start = _interior_point(sec, sec.project(pts))
        S = replace(S, anchor=sec.lift(start)[0])
        pts = _sample_section(sec, start, cfg.n_samples, cfg.burn_in_for(S.d), cfg.thin, rng)
    return S, pts


def cut_with_cloud(S: UncertaintySet, x, p: float, accepted: bool, cfg: LearningConfig, rng, candidates=None):
    """Add the response halfspace, re-anchor, resample and re-detect thin directions.

    Returns the new set and a fresh sample cloud of its cylindrified form.
    """
    x = np.asarray(x, dtype=float)
    S = S.with_halfspace(x, p, 1 if accepted else -1)
    sec = _section(S)
    cand = sec.project(S.anchor) if candidates is None else sec.project(np.vstack([candidates, S.anchor]))
    start = _interior_point(sec, cand)
    S = replace(S, anchor=sec.lift(start)[0])
    pts = _sample_section(sec, start, cfg.n_samples, cfg.burn_in_for(S.d), cfg.thin, rng)
    return _freeze_small_directions(S, pts, cfg, rng)


def cut(S: UncertaintySet, x, p: float, accepted: bool, cfg: LearningConfig | None = None, rng=None) -> UncertaintySet:
    """Keep ``{s : s @ x >= p}`` if the price was accepted, else ``{s : s @ x <= p}``."""
    cfg = cfg or LearningConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    return cut_with_cloud(S, x, p, accepted, cfg, rng)[0]


class ProjectedVolumeLearner(BaseEstimator):
    """Online estimator of the customer utility vector from accept/reject responses.

    Parameters
    ----------
    d : int
        Context dimension.
    eps_u : float
        Directed-diameter threshold that ends exploration.
    n_samples, burn_in, thin : int
        Hit-and-run settings; ``burn_in=None`` means ``500 * d**2``.
    width_factor : float
        A direction is frozen once the set is thinner than ``width_factor * eps_u`` along it.
    random_state : numpy Generator or int
        Source of randomness for the sampler.

    Attributes
    ----------
    set_ : UncertaintySet
    samples_ : ndarray of shape (n_samples, d)
        Latest cloud of the cylindrified set.
    coef_ : ndarray of shape (d,)
        Current centroid estimate of the utility vector.
    converged_ : bool
    """

    def __init__(self, d=4, eps_u=1e-4, n_samples=2000, burn_in=None, thin=5, width_factor=10.0, random_state=None):
        self.d = d
        self.eps_u = eps_u
        self.n_samples = n_samples
        self.burn_in = burn_in
        self.thin = thin
        self.width_factor = width_factor
        self.random_state = random_state

    @classmethod
    def from_config(cls, d: int, cfg: LearningConfig, random_state=None) -> "ProjectedVolumeLearner":
        return cls(d=d, eps_u=cfg.eps_u, n_samples=cfg.n_samples, burn_in=cfg.burn_in, thin=cfg.thin,
                   width_factor=cfg.width_factor, random_state=random_state)

    def _cfg(self) -> LearningConfig:
        return LearningConfig(eps_u=self.eps_u, n_samples=self.n_samples, burn_in=self.burn_in,
                              thin=self.thin, width_factor=self.width_factor)

    def _init(self):
        if isinstance(self.random_state, np.random.Generator):
            self._rng = self.random_state
        else:
            self._rng = np.random.default_rng(self.random_state)
        self.set_ = UncertaintySet.unit_ball(self.d)
        self.samples_ = cloud(self.set_, self._cfg(), self._rng)
        self.coef_ = self.samples_.mean(axis=0)
        self.converged_ = False
        self.n_queries_ = 0

    def centroid(self) -> np.ndarray:
        if not hasattr(self, "set_"):
            self._init()
        return self.coef_

    def propose_price(self, x) -> float:
        return propose_price(self.centroid(), x)

    def partial_fit(self, x, p: float, accepted: bool):
        """Apply one price response and refresh the centroid and convergence flag."""
        if not hasattr(self, "set_"):
            self._init()
        x = np.asarray(x, dtype=float)
        self.set_, self.samples_ = cut_with_cloud(self.set_, x, p, accepted, self._cfg(), self._rng,
                                                   candidates=self.samples_)
        self.coef_ = self.samples_.mean(axis=0)
        self.n_queries_ += 1
        if np.linalg.norm(x) > 0:
            self.converged_ = phase1_converged(self.samples_, x, self.eps_u)
        return self

    def predict(self, X) -> np.ndarray:
        """Estimated utilities ``coef_ @ x`` (clamped at zero) for each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.maximum(X @ self.centroid(), 0.0)
