"""Recursive least squares with exponential forgetting, used to pull twin KPMs toward measurements."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class RlsConfig:
    tau: int = 3
    W: int = 5
    lam: float = 0.98
    gamma: float = 1e-4
    tau_m: float = 25.0

    def __post_init__(self):
        if self.tau < 0 or self.W < 1:
            raise ConfigError("need tau >= 0 and W >= 1")
        if not 0 < self.lam <= 1:
            raise ConfigError(f"forgetting factor {self.lam} outside (0, 1]")

    @property
    def dim(self) -> int:
        return self.tau + 3


@dataclass
class RlsState:
    theta: np.ndarray
    P: np.ndarray
    step: int = 0

    def to_json(self):
        return {"theta": self.theta.tolist(), "P": self.P.tolist(), "step": self.step}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["theta"], dtype=float), np.array(d["P"], dtype=float), int(d["step"]))


def init(config: RlsConfig, dim: int | None = None) -> RlsState:
    if not config.gamma > 0:
        raise ConfigError(f"ridge gamma must be positive, got {config.gamma}")
    n = config.dim if dim is None else dim
    return RlsState(np.zeros(n), np.eye(n) / config.gamma, 0)


reset = init


def _vec(u, n) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (n,):
        raise ShapeError(f"feature shape {u.shape} does not match ({n},)")
    return u


def predict(state: RlsState, u) -> float:
    return float(_vec(u, len(state.theta)) @ state.theta)


def update(state: RlsState, u, x: float, lam: float) -> tuple[RlsState, float]:
    u = _vec(u, len(state.theta))
    if not (np.all(np.isfinite(u)) and math.isfinite(x)):
        raise NumericError("non-finite input to RLS update")
    Pu = state.P @ u
    k = Pu / (lam + u @ Pu)
    e = float(x - u @ state.theta)
    theta = state.theta + k * e
    P = (state.P - np.outer(k, Pu)) / lam
    P = (P + P.T) / 2
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(P))):
        raise NumericError("RLS state became non-finite")
    return RlsState(theta, P, state.step + 1), e


def batch_solution(U, X, lam: float, gamma: float) -> np.ndarray:
    """Weighted ridge oracle: argmin sum lam^(t-s) (x_s - u_s.theta)^2 + lam^t gamma |theta|^2."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    X = np.asarray(X, dtype=float)
    t = len(X)
    if t < 1:
        raise ShapeError("batch solution needs at least one sample")
    w = lam ** np.arange(t - 1, -1, -1, dtype=float)
    A = (U * w[:, None]).T @ U + lam**t * gamma * np.eye(U.shape[1])
    b = (U * w[:, None]).T @ X
    return np.linalg.solve(A, b)


def correct(state: RlsState, u, y: float, d_prev: float, tau_m: float) -> float:
    """Gated output: the fitted value while the previous deviation is small, raw twin output otherwise."""
    if abs(d_prev) <= tau_m:
        return predict(state, u)
    return float(y)


def tuner_feature(history, tau: int, W: int) -> np.ndarray:
    """u_t = [1, y_t, y_{t-1}..y_{t-tau}, mean of last W]; short histories repeat the oldest value."""
    y = np.asarray(history, dtype=float)
    if y.size == 0:
        raise ShapeError("empty history")
    need = max(tau + 1, W)
    if y.size < need:
        y = np.concatenate([np.full(need - y.size, y[0]), y])
    lags = y[::-1][: tau + 1]
    return np.concatenate([[1.0], lags, [y[-W:].mean()]])


@dataclass
class TunerBank:
    """Independent RLS state and twin-output history for each metric key."""

    config: RlsConfig = field(default_factory=RlsConfig)
    states: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict)

    def step(self, key, y: float, x: float | None, d_prev: float) -> tuple[float, float | None]:
        """Feed twin output y and measurement x (None when missing); returns (corrected, innovation)."""
        cfg = self.config
        hist = self.history.setdefault(key, [])
        hist.append(float(y))
        del hist[: -max(cfg.tau + 1, cfg.W)]
        u = tuner_feature(hist, cfg.tau, cfg.W)
        state = self.states.get(key) or init(cfg)
        e = None
        if x is not None and math.isfinite(x):
            state, e = update(state, u, float(x), cfg.lam)
        self.states[key] = state
        return correct(state, u, y, d_prev, cfg.tau_m), e

    def reset(self):
        self.states.clear()
        self.history.clear()

    def save(self, path):
        Path(path).write_text(json.dumps({k: s.to_json() for k, s in sorted(self.states.items())}) + "\n")

    def load(self, path):
        self.states = {k: RlsState.from_json(v) for k, v in json.loads(Path(path).read_text()).items()}
