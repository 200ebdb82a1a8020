"""Euclidean projection onto a box intersected with half-spaces (Dykstra's alternating projections)."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, ProjectionError
from .netsim import BOX_BOUNDS, CATEGORICAL_FIELDS, CONTINUOUS_FIELDS

KKT_TOL = 1e-8
MAX_SWEEPS = 10_000


@dataclass
class ConstraintSet:
    lower: np.ndarray
    upper: np.ndarray
    A: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))
    names: tuple = ()
    categories: dict = field(default_factory=dict)
    feasible_point: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, float)
        self.upper = np.asarray(self.upper, float)
        n = len(self.lower)
        self.A = np.asarray(self.A, float).reshape(-1, n) if np.size(self.A) else np.zeros((0, n))
        self.b = np.asarray(self.b, float).reshape(-1)
        if np.any(self.lower >= self.upper):
            raise ConfigError("every box needs lower < upper")
        z0 = self.lower if self.feasible_point is None else np.asarray(self.feasible_point, float)
        if not self.is_feasible(z0):
            raise ConfigError("no certified feasible point for the constraint set")

    def violation(self, z) -> float:
        v = max(float(np.max(self.lower - z, initial=0)), float(np.max(z - self.upper, initial=0)))
        if len(self.b):
            v = max(v, float(np.max(self.A @ z - self.b, initial=0)))
        return v

    def is_feasible(self, z, tol=1e-12) -> bool:
        return self.violation(z) <= tol * (1 + np.max(np.abs(z), initial=0))


def default_constraints() -> ConstraintSet:
    names = tuple(CONTINUOUS_FIELDS)
    lo = np.array([BOX_BOUNDS[n][0] for n in names])
    hi = np.array([BOX_BOUNDS[n][1] for n in names])
    A = np.zeros((1, len(names)))
    A[0, names.index("Speed_Min")] = 1.0
    A[0, names.index("Speed_Max")] = -1.0
    cats = {name: allowed for name, (_, allowed) in CATEGORICAL_FIELDS.items()}
    return ConstraintSet(lo, hi, A, np.zeros(1), names, cats)


def _halfspace(x, a, b, aa):
    s = a @ x - b
    return x - (s / aa) * a if s > 0 else x


def project(c_hat, cs: ConstraintSet) -> np.ndarray:
    """argmin |z - c_hat|^2 subject to the box and A z <= b."""
    c_hat = np.asarray(c_hat, float)
    z = np.clip(c_hat, cs.lower, cs.upper)
    if cs.is_feasible(z):
        return z  # the box projection is already optimal
    # per-coordinate magnitudes so that Hz-scale and m/s-scale fields share one tolerance
    s = 1.0 + np.maximum(np.abs(c_hat), np.maximum(np.abs(cs.lower), np.abs(cs.upper)))
    row_s = 1.0 + np.abs(cs.A) @ s
    m = len(cs.b)
    norms = np.einsum("ij,ij->i", cs.A, cs.A)
    x = c_hat.copy()
    p_box = np.zeros_like(x)
    p_hs = np.zeros((m, len(x)))
    for sweep in range(1, MAX_SWEEPS + 1):
        start, p_start = x, np.vstack([p_box, p_hs])
        y = np.clip(x + p_box, cs.lower, cs.upper)
        p_box = x + p_box - y
        x = y
        for i in range(m):
            if norms[i] == 0:
                continue
            y = _halfspace(x + p_hs[i], cs.A[i], cs.b[i], norms[i])
            p_hs[i] = x + p_hs[i] - y
            x = y
        # stationarity holds by construction (c_hat - x = sum of increments); check the rest
        slack = (cs.A @ x - cs.b) / row_s
        viol = max(float(np.max(slack, initial=0)), float(np.max((cs.lower - x) / s, initial=0)),
                   float(np.max((x - cs.upper) / s, initial=0)))
        moved = max(float(np.max(np.abs(x - start) / s)), float(np.max(np.abs(np.vstack([p_box, p_hs]) - p_start) / s)))
        comp = max((float(np.linalg.norm(p_hs[i] / s)) * abs(slack[i]) for i in range(m)), default=0.0)
        if max(viol, moved, comp) <= KKT_TOL:
            z = _polish(x, c_hat, cs, s, row_s)
            return z if z is not None else np.clip(x, cs.lower, cs.upper)
        if sweep % 25 == 0:
            z = _polish(x, c_hat, cs, s, row_s)
            if z is not None:
                return z
    raise ProjectionError(f"projection did not converge in {MAX_SWEEPS} sweeps")


def _solve_active(c_hat, cs: ConstraintSet, s, row_s, at_lo, at_hi, act):
    """Equality-constrained solve on one active set; returns z if KKT holds, else None."""
    fixed = at_lo | at_hi
    z = c_hat.copy()
    z[at_lo], z[at_hi] = cs.lower[at_lo], cs.upper[at_hi]
    free = ~fixed
    mu = np.zeros(0)
    if len(act):
        Af = cs.A[np.ix_(act, free)]
        rhs = cs.b[act] - cs.A[np.ix_(act, fixed)] @ z[fixed]
        mu = np.linalg.lstsq(Af @ Af.T, Af @ c_hat[free] - rhs, rcond=None)[0]
        z[free] = c_hat[free] - Af.T @ mu
    if np.any(mu < -1e-12):
        return None
    if np.any((z - cs.lower) / s < -1e-12) or np.any((cs.upper - z) / s < -1e-12):
        return None
    if np.any((cs.A @ z - cs.b) / row_s > 1e-12):
        return None
    # box multipliers must push inward: the remaining gradient on fixed coordinates
    g = c_hat - z - (cs.A[act].T @ mu if len(act) else 0.0)
    if np.any(g[at_lo] / s[at_lo] > 1e-12) or np.any(g[at_hi] / s[at_hi] < -1e-12):
        return None
    return np.clip(z, cs.lower, cs.upper)


def _polish(x, c_hat, cs: ConstraintSet, s, row_s, tol=1e-2, max_candidates=10):
    """Try every subset of the constraints that are nearly active at x; a KKT-certified one is the optimum."""
    n = len(x)
    near_lo = np.flatnonzero((x - cs.lower) / s <= tol)
    near_hi = np.flatnonzero((cs.upper - x) / s <= tol)
    near_hs = np.flatnonzero((cs.A @ x - cs.b) / row_s >= -tol)
    cand = [("lo", i) for i in near_lo] + [("hi", i) for i in near_hi] + [("hs", i) for i in near_hs]
    if len(cand) > max_candidates:
        return None
    for size in range(len(cand), -1, -1):
        for subset in combinations(cand, size):
            at_lo = np.zeros(n, bool)
            at_hi = np.zeros(n, bool)
            act = []
            for kind, i in subset:
                if kind == "lo":
                    at_lo[i] = True
                elif kind == "hi":
                    at_hi[i] = True
                else:
                    act.append(i)
            if np.any(at_lo & at_hi):
                continue
            z = _solve_active(c_hat, cs, s, row_s, at_lo, at_hi, np.array(act, dtype=int))
            if z is not None:
                return z
    return None
