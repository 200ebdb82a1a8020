"""Inverse mapping from KPM windows to scenario configurations."""
from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateTarget, ShapeError
from .gbt import GbtParams, HuberRegressor, OvrClassifier, check_dim
from .netsim import CATEGORICAL_FIELDS, CONTINUOUS_FIELDS, TABLE_II, ScenarioConfig, run
from .projection import ConstraintSet, default_constraints, project
from .telemetry import CELL_METRICS, UE_METRICS, FeatureStats, standardize

CONT_NAMES = tuple(CONTINUOUS_FIELDS)
CAT_NAMES = tuple(CATEGORICAL_FIELDS)
STATS = ("mean", "std", "p10", "p90", "min", "max", "tstd")
EXTRA_FEATURES = ("n_cells", "n_ues", "nbr_report_frac", "frac_qpsk", "frac_16qam", "frac_64qam", "frac_err")
LEVEL_METRICS = tuple(("cell", m) for m in CELL_METRICS) + tuple(("ue", m) for m in UE_METRICS)
FEATURE_NAMES = tuple(f"{lv}.{m}:{s}" for lv, m in LEVEL_METRICS for s in STATS) + EXTRA_FEATURES

PRECISION = {
    "OutageThreshold": 0.1,
    "Bandwidth": 1e3,
    "CenterFrequency": 1e3,
    "IntersideDistanceCells": 0.1,
    "IntersideDistanceUEs": 0.1,
    "Speed_Min": 0.1,
    "Speed_Max": 0.1,
    "PacketSize": 1.0,
    "BufferSize": 1.0,
    "HoSinrDifference": 0.1,
    "IndicationPeriodicity": 1e-3,
}

DEFAULT_WINDOW = 10
DEFAULT_STRIDE = 10
LAMBDA_W = 0.99


def sample_weight(q: int, lam_w: float, T: int, t: int) -> float:
    if not 0 < lam_w < 1:
        raise ConfigError(f"recency factor {lam_w} outside (0, 1)")
    return float(q) * lam_w ** (T - t)


def _is_cell(entity: str) -> bool:
    return entity.startswith("cell")


def topology_from_samples(samples) -> dict:
    """Entity counting: cells reporting anything, and UEs reporting serving SINR in the latest interval."""
    samples = list(samples)
    if not samples:
        raise ShapeError("no samples to infer topology from")
    last = max(s.timestamp for s in samples)
    cells = {s.entity for s in samples if _is_cell(s.entity)}
    ues = {s.entity for s in samples if s.timestamp == last and s.metric == "serving_sinr"}
    return {"num_cells": len(cells), "num_ues": len(ues)}


def window_features(samples) -> np.ndarray:
    """Summary statistics of every catalog metric over one window, plus entity counts and ratios."""
    by_metric = defaultdict(list)
    by_series = defaultdict(list)
    for s in samples:
        key = ("cell" if _is_cell(s.entity) else "ue", s.metric)
        by_metric[key].append(s.value)
        by_series[(key, s.entity)].append(s.value)
    out = []
    for key in LEVEL_METRICS:
        v = np.asarray(by_metric.get(key, ()), dtype=float)
        if v.size == 0:
            out.extend([0.0] * len(STATS))
            continue
        tstd = [np.std(x) for (kk, _), x in by_series.items() if kk == key]
        p10, p90 = np.percentile(v, [10, 90])
        out.extend([v.mean(), v.std(), p10, p90, v.min(), v.max(), float(np.mean(tstd))])
    topo = topology_from_samples(samples)
    n_ue_obs = len(by_metric.get(("ue", "serving_sinr"), ()))
    active_cells = topo["num_cells"]
    denom = n_ue_obs * max(active_cells - 1, 0)
    nbr = len(by_metric.get(("ue", "neighbor_sinr"), ())) / denom if denom else 0.0
    tb = {m: float(np.sum(by_metric.get(("cell", m), ()))) for m in ("tb_total", "tb_qpsk", "tb_16qam", "tb_64qam", "tb_errors")}
    total = max(tb["tb_total"], 1e-6)
    out.extend([topo["num_cells"], topo["num_ues"], nbr, tb["tb_qpsk"] / total, tb["tb_16qam"] / total,
                tb["tb_64qam"] / total, tb["tb_errors"] / total])
    return np.asarray(out, dtype=float)


def split_windows(samples, L: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE):
    """Yield (index, window samples, quality) for windows of L consecutive report times."""
    by_t = defaultdict(list)
    for s in samples:
        by_t[s.timestamp].append(s)
    times = sorted(by_t)
    for k, end in enumerate(range(L, len(times) + 1, stride)):
        win = [s for t in times[end - L : end] for s in by_t[t]]
        yield k, win, int(all(s.quality for s in win))


@dataclass
class TrainingPair:
    features: np.ndarray
    config: dict
    q: int
    t: int
    scenario: int = 0

    def to_json(self):
        return {"features": self.features.tolist(), "config": self.config, "q": self.q, "t": self.t,
                "scenario": self.scenario}

    @classmethod
    def from_json(cls, d):
        return cls(np.asarray(d["features"], float), d["config"], int(d["q"]), int(d["t"]), int(d.get("scenario", 0)))


def write_training_set(pairs, path):
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def read_training_set(path) -> list[TrainingPair]:
    return [TrainingPair.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def scenario_grid(
    bandwidths=(10e6, 15e6, 20e6, 25e6),
    packet_sizes=(64.0, 128.0, 256.0, 512.0),
    mobility=("RandomDirection2d", "ConstantPosition"),
    handover=("FixedTtt", "Dynamic"),
    duration: float = 300.0,
    seed: int = 0,
) -> list[ScenarioConfig]:
    """Cartesian grid over the varied fields, other fields at their reference values; topology varies per point."""
    rng = np.random.default_rng(seed)
    base = dict(TABLE_II)
    out = []
    for bw in bandwidths:
        for ps in packet_sizes:
            for mob in mobility:
                for ho in handover:
                    d = dict(base, Bandwidth=bw, PacketSize=ps, MobilityModel=mob, HandoverMode=ho,
                             num_cells=int(rng.choice([3, 5])), num_ues=int(rng.integers(4, 11)),
                             duration=duration, seed=int(rng.integers(2**31)))
                    out.append(ScenarioConfig.from_json(d))
    return out


def config_targets(cfg: ScenarioConfig) -> dict:
    d = cfg.to_json()
    return {k: d[k] for k in CONT_NAMES + CAT_NAMES}


def build_training_set(configs, L: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) -> list[TrainingPair]:
    pairs = []
    for i, cfg in enumerate(configs):
        _, samples = run(cfg, cfg.seed + 1)
        targets = config_targets(cfg)
        for k, win, q in split_windows(samples, L, stride):
            pairs.append(TrainingPair(window_features(win), targets, q, k, i))
    return pairs


@dataclass
class InferenceModel:
    stats: FeatureStats
    regressors: dict
    classifiers: dict
    feature_names: tuple = FEATURE_NAMES
    constraints: ConstraintSet = field(default_factory=default_constraints)

    @property
    def n_features(self):
        return len(self.feature_names)

    def save(self, path):
        doc = {
            "feature_names": list(self.feature_names),
            "stats": self.stats.to_dict(),
            "regressors": {k: m.to_json() for k, m in self.regressors.items()},
            "classifiers": {k: m.to_json() for k, m in self.classifiers.items()},
        }
        Path(path).write_text(json.dumps(doc) + "\n")

    @classmethod
    def load(cls, path) -> "InferenceModel":
        doc = json.loads(Path(path).read_text())
        return cls(
            FeatureStats.from_dict(doc["stats"]),
            {k: HuberRegressor.from_json(v) for k, v in doc["regressors"].items()},
            {k: OvrClassifier.from_json(v) for k, v in doc["classifiers"].items()},
            tuple(doc["feature_names"]),
        )

    def standardize(self, features) -> np.ndarray:
        X = check_dim(features, self.n_features)
        return np.atleast_2d(standardize(X, self.stats))


def pair_weights(pairs, lam_w: float = LAMBDA_W) -> np.ndarray:
    """Recency is measured within each scenario's own sequence of windows."""
    last = defaultdict(int)
    for p in pairs:
        last[p.scenario] = max(last[p.scenario], p.t)
    return np.array([sample_weight(p.q, lam_w, last[p.scenario], p.t) for p in pairs])


def train(pairs, params: GbtParams | None = None, lam_w: float = LAMBDA_W) -> InferenceModel:
    pairs = list(pairs)
    if len(pairs) < 50:
        raise ShapeError(f"need at least 50 training pairs, got {len(pairs)}")
    params = params or GbtParams()
    X = np.stack([p.features for p in pairs])
    w = pair_weights(pairs, lam_w)
    keep = w > 0
    stats = FeatureStats.fit(X[keep])
    Z = np.atleast_2d(standardize(X, stats))
    regs = {}
    for name in CONT_NAMES:
        y = np.array([float(p.config[name]) for p in pairs])
        regs[name] = HuberRegressor(params, name).fit(Z, y, w)
    clss = {}
    for name in CAT_NAMES:
        labels = [p.config[name] for p in pairs]
        clss[name] = OvrClassifier(CATEGORICAL_FIELDS[name][1], params, name).fit(Z, labels, w)
    return InferenceModel(stats, regs, clss)


def predict(model: InferenceModel, features_std) -> tuple[np.ndarray, dict]:
    """Continuous predictions in Table II field order and one probability vector per categorical field."""
    Z = check_dim(features_std, model.n_features)
    c = np.stack([model.regressors[n].predict(Z) for n in CONT_NAMES], axis=1)
    probs = {n: model.classifiers[n].predict_proba(Z) for n in CAT_NAMES}
    if len(Z) == 1:
        return c[0], {n: p[0] for n, p in probs.items()}
    return c, probs


def map_label(probs, values) -> str:
    return values[int(np.argmax(np.asarray(probs, float)))]


def round_field(name: str, value: float) -> float:
    q = PRECISION[name]
    return float(round(round(value / q) * q, 6))


def assemble_config(c_tilde, labels: dict, topology: dict, **runtime) -> ScenarioConfig:
    d = {name: round_field(name, v) for name, v in zip(CONT_NAMES, c_tilde)}
    d.update(labels)
    d.update(topology)
    d.update(runtime)
    return ScenarioConfig.from_json(d)


def infer_config(model: InferenceModel, samples, **runtime) -> tuple[ScenarioConfig, dict]:
    """Full pipeline for one KPM window: features, prediction, projection, labels, topology, rounding."""
    samples = list(samples)
    Z = model.standardize(window_features(samples))
    c_hat, probs = predict(model, Z)
    c_tilde = project(c_hat, model.constraints)
    labels = {n: map_label(probs[n], CATEGORICAL_FIELDS[n][1]) for n in CAT_NAMES}
    cfg = assemble_config(c_tilde, labels, topology_from_samples(samples), **runtime)
    return cfg, {"c_hat": c_hat.tolist(), "c_tilde": c_tilde.tolist(), "probs": {k: v.tolist() for k, v in probs.items()}}


def holdout_split(pairs, frac: float = 0.25, seed: int = 0):
    scen = sorted({p.scenario for p in pairs})
    rng = np.random.default_rng(seed)
    held = set(rng.permutation(scen)[: int(round(frac * len(scen)))].tolist())
    return [p for p in pairs if p.scenario not in held], [p for p in pairs if p.scenario in held]


def evaluate(model: InferenceModel, pairs) -> dict:
    """Per-field MAPE (percent) for continuous fields and accuracy (percent) for categorical ones."""
    X = np.stack([p.features for p in pairs])
    c, probs = predict(model, model.standardize(X))
    c = np.atleast_2d(c)
    out = {}
    for j, name in enumerate(CONT_NAMES):
        truth = np.array([float(p.config[name]) for p in pairs])
        out[name] = float(np.mean(np.abs(c[:, j] - truth) / np.maximum(np.abs(truth), 1e-6)) * 100)
    for name in CAT_NAMES:
        P = np.atleast_2d(probs[name])
        pred = [map_label(row, CATEGORICAL_FIELDS[name][1]) for row in P]
        out[name] = float(np.mean([a == p.config[name] for a, p in zip(pred, pairs)]) * 100)
    return out


def train_quietly(pairs, params=None, lam_w=LAMBDA_W) -> InferenceModel:
    """train() with the expected constant-column warnings silenced."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateTarget)
        return train(pairs, params, lam_w)

