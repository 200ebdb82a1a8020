"""KPM data model, trace files, resampling and feature maps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CatalogError,
    EmptySeries,
    InsufficientHistory,
    InvalidInterval,
    ParseError,
    ShapeError,
)

RATIO_EPS = 1e-6
STD_FLOOR = 1e-12


@dataclass(frozen=True)
class MetricInfo:
    name: str
    unit: str
    levels: tuple[str, ...]
    nonneg: bool = True


CELL_METRICS = (
    "dl_prb_usage",
    "active_ues",
    "pdcp_volume",
    "tb_total",
    "tb_qpsk",
    "tb_16qam",
    "tb_64qam",
    "tb_errors",
)
UE_METRICS = (
    "prb_alloc",
    "dl_pdcp_throughput",
    "serving_sinr",
    "neighbor_sinr",
    "buffer_occupancy",
    "pdcp_volume",
)

CATALOG: dict[str, MetricInfo] = {
    "dl_prb_usage": MetricInfo("dl_prb_usage", "PRB", ("cell",)),
    "active_ues": MetricInfo("active_ues", "count", ("cell",)),
    "pdcp_volume": MetricInfo("pdcp_volume", "byte", ("cell", "ue")),
    "tb_total": MetricInfo("tb_total", "count", ("cell",)),
    "tb_qpsk": MetricInfo("tb_qpsk", "count", ("cell",)),
    "tb_16qam": MetricInfo("tb_16qam", "count", ("cell",)),
    "tb_64qam": MetricInfo("tb_64qam", "count", ("cell",)),
    "tb_errors": MetricInfo("tb_errors", "count", ("cell",)),
    "prb_alloc": MetricInfo("prb_alloc", "PRB", ("ue",)),
    "dl_pdcp_throughput": MetricInfo("dl_pdcp_throughput", "byte/s", ("ue",)),
    "serving_sinr": MetricInfo("serving_sinr", "dB", ("ue",), nonneg=False),
    # entity is "ue<i>@cell<j>", one report per measured neighbor
    "neighbor_sinr": MetricInfo("neighbor_sinr", "dB", ("ue",), nonneg=False),
    "buffer_occupancy": MetricInfo("buffer_occupancy", "byte", ("ue",)),
}


def check_metric(name: str) -> MetricInfo:
    try:
        return CATALOG[name]
    except KeyError:
        raise CatalogError(f"unknown metric {name!r}") from None


@dataclass(frozen=True)
class KpmSample:
    timestamp: float
    entity: str
    metric: str
    value: float
    quality: int = 1

    def __post_init__(self):
        if not self.timestamp >= 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.quality not in (0, 1):
            raise ValueError(f"quality must be 0 or 1, got {self.quality}")
        check_metric(self.metric)


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class KpmSeries:
    metric: str
    entity: str
    times: np.ndarray
    values: np.ndarray
    quality: np.ndarray
    interval: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "times", _frozen(self.times))
        object.__setattr__(self, "values", _frozen(self.values))
        q = np.array(self.quality, dtype=np.int8)
        q.setflags(write=False)
        object.__setattr__(self, "quality", q)
        if not (len(self.times) == len(self.values) == len(self.quality)):
            raise ShapeError("times, values and quality differ in length")

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_samples(cls, samples: Iterable[KpmSample]) -> "KpmSeries":
        samples = sorted(samples, key=lambda s: s.timestamp)
        if not samples:
            raise EmptySeries("no samples")
        keys = {(s.metric, s.entity) for s in samples}
        if len(keys) != 1:
            raise ValueError(f"samples span several (metric, entity) keys: {sorted(keys)}")
        metric, entity = keys.pop()
        return cls(
            metric,
            entity,
            [s.timestamp for s in samples],
            [s.value for s in samples],
            [s.quality for s in samples],
        )

    @classmethod
    def from_values(cls, values, interval=1.0, metric="serving_sinr", entity="ue0", quality=None):
        """Uniform series on the grid interval, 2*interval, ..."""
        values = np.asarray(values, dtype=float)
        times = interval * np.arange(1, len(values) + 1)
        if quality is None:
            quality = np.ones(len(values), dtype=np.int8)
        return cls(metric, entity, times, values, quality, interval)


def resample(series: KpmSeries, interval: float) -> KpmSeries:
    """Bucket-average onto the grid k*interval; bucket k covers (k*interval - interval, k*interval].

    Empty buckets carry the previous value forward with quality 0; a bucket holding any
    quality-0 sample is marked quality 0.
    """
    if not interval > 0:
        raise InvalidInterval(f"interval must be positive, got {interval}")
    if len(series) == 0:
        raise EmptySeries(f"{series.metric}/{series.entity} is empty")
    t = series.times
    if np.any(np.diff(t) < 0):
        raise ValueError("timestamps must be nondecreasing")
    # tolerance keeps points already on the grid in their own bucket
    k = np.ceil(t / interval - 1e-9).astype(np.int64)
    k0, k1 = int(k[0]), int(k[-1])
    n = k1 - k0 + 1
    sums = np.bincount(k - k0, weights=series.values, minlength=n)
    counts = np.bincount(k - k0, minlength=n)
    bad = np.bincount(k - k0, weights=(series.quality == 0).astype(float), minlength=n)

    values = np.empty(n)
    quality = np.ones(n, dtype=np.int8)
    for i in range(n):
        if counts[i]:
            values[i] = sums[i] / counts[i]
            if bad[i] > 0:
                quality[i] = 0
        else:
            # counts[0] is never zero, so i - 1 exists
            values[i] = values[i - 1]
            quality[i] = 0
    times = interval * np.arange(k0, k1 + 1)
    return KpmSeries(series.metric, series.entity, times, values, quality, interval)


def window_mean(series, t: int, W: int) -> float:
    """Mean of the W most recent values ending at 1-based index t."""
    values = series.values if isinstance(series, KpmSeries) else np.asarray(series, dtype=float)
    if W < 1:
        raise ValueError("W must be >= 1")
    if t > len(values) or t < W:
        raise InsufficientHistory(f"need {W} samples at or before t={t}, have {min(t, len(values))}")
    return float(np.mean(values[t - W : t]))


@dataclass(frozen=True)
class FeatureVector:
    t: float
    value: float
    lags: tuple[float, ...]
    window_mean: float
    rate: float
    calendar: float
    cross_ratios: Mapping[str, float] = field(default_factory=dict)
    quality: int = 1
    standardized: bool = False
    stats: "FeatureStats | None" = None

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.value, *self.lags, self.window_mean, self.rate, self.calendar, *self.cross_ratios.values()]
        )


def guarded_ratio(num: float, den: float, eps: float = RATIO_EPS) -> float:
    return num / max(abs(den), eps)


def build_features(
    series: KpmSeries,
    tau: int,
    W: int,
    ratios: Mapping[str, tuple[KpmSeries, KpmSeries]] | None = None,
    day_seconds: float = 86400.0,
) -> list[FeatureVector]:
    """Causal lag/window/rate features, one vector per index with full history."""
    if tau < 0 or W < 1:
        raise ValueError("need tau >= 0 and W >= 1")
    x = series.values
    n = len(x)
    if n < max(tau, W) + 1:
        raise InsufficientHistory(f"series of length {n} shorter than max(tau, W) + 1 = {max(tau, W) + 1}")
    ratios = ratios or {}
    for name, (num, den) in ratios.items():
        if len(num) != n or len(den) != n:
            raise ShapeError(f"ratio {name!r} series not aligned with the anchor series")

    out = []
    start = max(tau, W - 1, 1)
    for i in range(start, n):
        lags = tuple(float(x[i - j]) for j in range(1, tau + 1))
        cross = {name: guarded_ratio(num.values[i], den.values[i]) for name, (num, den) in ratios.items()}
        out.append(
            FeatureVector(
                t=float(series.times[i]),
                value=float(x[i]),
                lags=lags,
                window_mean=float(np.mean(x[i - W + 1 : i + 1])),
                rate=float(x[i] - x[i - 1]),
                calendar=float((series.times[i] % day_seconds) / day_seconds),
                cross_ratios=cross,
                quality=int(series.quality[i]),
            )
        )
    return out


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "FeatureStats":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X.mean(axis=0), X.std(axis=0))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def standardize(x, stats: FeatureStats):
    """z = (x - mean) / std, with std below 1e-12 replaced by 1.

    Accepts a scalar, an array whose trailing dimension matches the statistics, or a
    sequence of FeatureVectors (returned standardized, with the stats attached).
    """
    mean = np.atleast_1d(np.asarray(stats.mean, dtype=float))
    std = np.atleast_1d(np.asarray(stats.std, dtype=float))
    std = np.where(std < STD_FLOOR, 1.0, std)
    if isinstance(x, Sequence) and x and isinstance(x[0], FeatureVector):
        out = []
        for fv in x:
            z = standardize(fv.as_array(), stats)
            k = len(fv.lags)
            names = list(fv.cross_ratios)
            out.append(
                FeatureVector(
                    t=fv.t,
                    value=float(z[0]),
                    lags=tuple(float(v) for v in z[1 : 1 + k]),
                    window_mean=float(z[1 + k]),
                    rate=float(z[2 + k]),
                    calendar=float(z[3 + k]),
                    cross_ratios={n: float(v) for n, v in zip(names, z[4 + k :])},
                    quality=fv.quality,
                    standardized=True,
                    stats=stats,
                )
            )
        return out
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if mean.shape != (1,):
            raise ShapeError(f"scalar input but stats have dimension {mean.shape[0]}")
        return float((arr - mean[0]) / std[0])
    if arr.shape[-1] != mean.shape[0]:
        raise ShapeError(f"feature dimension {arr.shape[-1]} != stats dimension {mean.shape[0]}")
    return (arr - mean) / std


# --- trace files -----------------------------------------------------------

def _sample_line(s: KpmSample) -> str:
    return json.dumps(
        {"t": float(s.timestamp), "entity": s.entity, "metric": s.metric, "value": float(s.value), "q": int(s.quality)},
        separators=(",", ":"),
    )


def sort_samples(samples: Iterable[KpmSample]) -> list[KpmSample]:
    return sorted(samples, key=lambda s: (s.timestamp, s.entity))


def write_trace(samples: Iterable[KpmSample], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s in sort_samples(samples):
            fh.write(_sample_line(s))
            fh.write("\n")


def read_trace(path) -> list[KpmSample]:
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", lineno)
            missing = {"t", "entity", "metric", "value", "q"} - obj.keys()
            if missing:
                raise ParseError(f"missing field(s) {sorted(missing)}", lineno)
            check_metric(obj["metric"])
            try:
                out.append(KpmSample(float(obj["t"]), str(obj["entity"]), obj["metric"], float(obj["value"]), int(obj["q"])))
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), lineno) from None
    return out


def group_series(samples: Iterable[KpmSample]) -> dict[tuple[str, str], KpmSeries]:
    """Split a flat sample list into one series per (metric, entity)."""
    buckets: dict[tuple[str, str], list[KpmSample]] = {}
    for s in samples:
        buckets.setdefault((s.metric, s.entity), []).append(s)
    return {key: KpmSeries.from_samples(v) for key, v in sorted(buckets.items())}
