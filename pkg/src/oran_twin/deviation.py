"""Relative errors, per-metric EWMAs and the normalized deviation score."""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MAD_FLOOR = 1e-3
MIN_MAD_SAMPLES = 5


class _Deferred:
    """Marker returned by :func:`aggregate` when too little weight is observed."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Deferred"

    def __bool__(self):
        return False


Deferred = _Deferred()


@dataclass(frozen=True)
class DeviationConfig:
    eps: float = 1e-6
    halflife: float = 10.0  # in reporting intervals
    omega: dict = field(default_factory=dict)  # per-metric priority, default 1
    tau_warn: float = 5.0
    tau_alarm: float = 20.0
    min_coverage: float = 0.5
    mad_window: int = 100

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if not 0 <= self.tau_warn < self.tau_alarm:
            raise ConfigError(f"need 0 <= tau_warn < tau_alarm, got {self.tau_warn}, {self.tau_alarm}")
        if not 0 < self.min_coverage <= 1:
            raise ConfigError("min_coverage must lie in (0, 1]")
        if any(w < 0 for w in self.omega.values()):
            raise ConfigError("priorities must be nonnegative")

    def priority(self, key) -> float:
        """Priority by full key, then by the metric part of a "metric/entity" key."""
        if key in self.omega:
            return self.omega[key]
        return self.omega.get(str(key).split("/")[0], 1.0)


def relative_error(y: float, x: float, eps: float = 1e-6) -> float:
    return 100.0 * (y - x) / max(abs(x), eps)


def alpha_from_halflife(delta: float, H: float) -> float:
    if not (delta > 0 and H > 0):
        raise ConfigError(f"interval and half-life must be positive, got {delta}, {H}")
    return 1.0 - 2.0 ** (-delta / H)


def ewma_update(d_prev: float, delta_corr: float, alpha: float) -> float:
    return alpha * delta_corr + (1.0 - alpha) * d_prev


def mad(residuals) -> float:
    r = np.asarray(residuals, dtype=float)
    if r.size < MIN_MAD_SAMPLES:
        return 1.0
    return max(float(np.median(np.abs(r - np.median(r)))), MAD_FLOOR)


def compute_weights(omega: dict, residual_history: dict) -> dict:
    if omega and all(v == 0 for v in omega.values()):
        raise ConfigError("all priorities are zero")
    return {k: omega.get(k, 1.0) / mad(residual_history.get(k, ())) for k in omega}


def aggregate(d: dict, w: dict, mask: dict, min_coverage: float):
    """Weighted mean of |d| over observed metrics, or Deferred if coverage is too low."""
    total = sum(w.values())
    covered = [k for k in w if mask.get(k, False) and k in d]
    cw = sum(w[k] for k in covered)
    if total <= 0 or not covered or cw / total < min_coverage or cw <= 0:
        return Deferred
    return sum(w[k] * abs(d[k]) for k in covered) / cw


def score(d_bar: float, tau_warn: float, tau_alarm: float) -> float:
    if d_bar <= tau_warn:
        return 0.0
    if d_bar >= tau_alarm:
        return 1.0
    return (d_bar - tau_warn) / (tau_alarm - tau_warn)


@dataclass
class MetricRow:
    metric: str
    delta_raw: float
    delta_corr: float
    d_m: float


@dataclass
class Snapshot:
    t: float
    d_bar: float | None
    S: float
    deferred: bool
    rows: list


class DeviationMonitor:
    """Tracks every metric key's EWMA and turns one interval of observations into (d_bar, S)."""

    def __init__(self, config: DeviationConfig | None = None, interval: float = 1.0):
        self.config = config or DeviationConfig()
        self.alpha = alpha_from_halflife(interval, self.config.halflife * interval)
        self.d: dict = {}
        self.residuals: dict = {}
        self.S = 0.0
        self.d_bar: float | None = None

    def restart(self):
        """Forget smoothed deviations of a replaced twin; residual scale history is kept."""
        self.d.clear()

    def d_prev(self, key) -> float:
        return self.d.get(key, 0.0)

    def observe(self, t: float, values: dict) -> Snapshot:
        """values: key -> (twin raw, twin corrected, measurement or None)."""
        cfg = self.config
        rows, mask = [], {}
        for key, (y_raw, y_corr, x) in sorted(values.items()):
            present = x is not None and math.isfinite(x)
            mask[key] = present
            if not present:
                continue
            dr = relative_error(y_raw, x, cfg.eps)
            dc = relative_error(y_corr, x, cfg.eps)
            self.d[key] = ewma_update(self.d.get(key, 0.0), dc, self.alpha)
            hist = self.residuals.setdefault(key, deque(maxlen=cfg.mad_window))
            hist.append(dc)
            rows.append(MetricRow(key, dr, dc, self.d[key]))
        omega = {k: cfg.priority(k) for k in values}
        w = compute_weights(omega, self.residuals) if omega else {}
        agg = aggregate(self.d, w, mask, cfg.min_coverage) if w else Deferred
        if agg is Deferred:
            return Snapshot(t, None, self.S, True, rows)
        self.d_bar = agg
        self.S = score(agg, cfg.tau_warn, cfg.tau_alarm)
        return Snapshot(t, agg, self.S, False, rows)


LOG_COLUMNS = ("t", "metric", "delta_raw", "delta_corr", "d_m", "d_bar", "S", "decision")


class DeviationLog:
    """CSV log with one row per metric and one global row per interval."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(LOG_COLUMNS)

    def write(self, snap: Snapshot, decision: str):
        for r in snap.rows:
            self._w.writerow([repr(snap.t), r.metric, repr(r.delta_raw), repr(r.delta_corr), repr(r.d_m), "", "", ""])
        d_bar = "" if snap.d_bar is None else repr(snap.d_bar)
        self._w.writerow([repr(snap.t), "__global__", "", "", "", d_bar, repr(snap.S), decision])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
