"""Closed loop: lockstep RW and twin stepping, tuning, deviation scoring, regeneration and xApp gating."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config_inference import DEFAULT_WINDOW, InferenceModel, infer_config
from .deviation import DeviationConfig, DeviationLog, DeviationMonitor, relative_error
from .errors import ConfigError, IllegalAction, RegenFailed, TwinError
from .netsim import (
    NetworkState,
    ScenarioConfig,
    advance,
    apply_control,
    init_scenario,
    steps_remaining,
    step,
)
from .rls import RlsConfig, TunerBank
from .telemetry import CELL_METRICS
from .xapp import ActionLog, XappConfig, XappState, commit, observe, propose

log = logging.getLogger(__name__)

DECISIONS = ("Regenerate", "Tune", "TuneAndControl", "Deferred")
NET_METRICS = CELL_METRICS + ("buffer_occupancy",)
UE_KEY_METRICS = ("prb_alloc", "dl_pdcp_throughput", "serving_sinr", "buffer_occupancy", "pdcp_volume")


@dataclass(frozen=True)
class SupervisorConfig:
    horizon: int | None = None  # intervals; None runs the RW scenario to its duration
    deviation: DeviationConfig = field(default_factory=DeviationConfig)
    rls: RlsConfig = field(default_factory=RlsConfig)
    cooldown: int = 30
    xapp: bool = True
    xapp_config: XappConfig = field(default_factory=XappConfig)
    rw_seed: int = 0
    dt_seed: int = 1
    window: int = DEFAULT_WINDOW
    eval_horizon: int = 10
    score_ue_metrics: tuple = ("serving_sinr",)  # per-UE metrics that enter the deviation score

    def __post_init__(self):
        if self.cooldown < 1:
            raise ConfigError("cooldown must be at least one interval")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be at least one interval")
        if self.eval_horizon < 1:
            raise ConfigError("evaluation horizon must be at least one interval")

    @property
    def warmup(self) -> int:
        return self.rls.tau + self.rls.W


def decide(S_prev: float, cooldown_elapsed: bool, xapp_enabled: bool) -> str:
    if S_prev >= 1.0 and cooldown_elapsed:
        return "Regenerate"
    if S_prev <= 0.0 and xapp_enabled:
        return "TuneAndControl"
    return "Tune"


def config_hash(cfg: ScenarioConfig | None) -> str | None:
    if cfg is None:
        return None
    return hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def kpm_vector(samples) -> dict:
    """Network totals of every cell metric and of UE buffers, plus per-UE keys "metric/ueN"."""
    out = {}
    for s in samples:
        if s.entity.startswith("cell") and s.metric in CELL_METRICS:
            out[f"{s.metric}/net"] = out.get(f"{s.metric}/net", 0.0) + s.value
        elif "@" not in s.entity and s.entity.startswith("ue"):
            if s.metric in UE_KEY_METRICS:
                out[f"{s.metric}/{s.entity}"] = s.value
            if s.metric == "buffer_occupancy":
                out["buffer_occupancy/net"] = out.get("buffer_occupancy/net", 0.0) + s.value
    return out


def attachments(state: NetworkState) -> dict:
    return {int(u): int(state.serving[u]) for u in np.flatnonzero(state.ue_active) if state.serving[u] >= 0}


def _serving_sinrs(samples) -> dict:
    return {s.entity: s.value for s in samples if s.metric == "serving_sinr"}


def model_inferrer(model: InferenceModel, rw_config: ScenarioConfig):
    """Inference callable that keeps the deployment's site seed, duration and area."""
    def infer(samples) -> ScenarioConfig:
        cfg, _ = infer_config(model, samples, seed=rw_config.seed, duration=rw_config.duration,
                              area_side=rw_config.area_side)
        return cfg
    return infer


def regenerate(infer, recent, now: float, cell_active, link_seed: int) -> NetworkState:
    """Infer a configuration from recent RW samples and fast-forward a fresh twin to ``now``."""
    try:
        cfg = infer(list(recent))
        if cfg.num_cells != len(cell_active):
            raise ConfigError(f"inferred {cfg.num_cells} cells, deployment has {len(cell_active)}")
        state = init_scenario(cfg, link_seed)
        state.cell_active[:] = cell_active  # sleeping cells drop their UEs at the first step
        return advance(state, now)
    except (TwinError, ValueError) as exc:
        raise RegenFailed(str(exc)) from exc


def evaluate_policy_in_twin(twin: NetworkState, actions, horizon: int = 10, require_saving: bool = True) -> bool:
    """True (Improves) iff the actions lower energy over the horizon without pushing a UE into outage.

    With ``require_saving`` False only the outage constraint is checked, which is how probe wake-ups
    (which always cost energy) are validated.
    """
    if not actions:
        return False
    treated = twin
    try:
        for a in actions:
            treated = apply_control(treated, a)
    except IllegalAction:
        return False
    n = min(horizon, steps_remaining(twin))
    if n < 1:
        return False
    thr = twin.config.outage_threshold
    base = twin
    e0b, e0t = base.energy_acc.sum(), treated.energy_acc.sum()
    for _ in range(n):
        base, sb = step(base)
        treated, st = step(treated)
        before = {e for e, v in _serving_sinrs(sb).items() if v < thr}
        after = {e for e, v in _serving_sinrs(st).items() if v < thr}
        if after - before:
            return False
    if not require_saving:
        return True
    return bool(treated.energy_acc.sum() - e0t < base.energy_acc.sum() - e0b)


@dataclass
class IntervalRow:
    t: float
    decision: str
    d_bar: float | None
    S: float
    energy_rw: float
    energy_dt: float | None
    actions: list
    outage: tuple


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    kpms: list = field(default_factory=list)  # (t, key, rw, dt_raw, dt_corr)
    regenerations: list = field(default_factory=list)

    def summary(self) -> dict:
        return summarize(self.kpms)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t", "decision", "d_bar", "S", "energy_rw", "energy_dt", "actions", "outage"))
            for r in self.rows:
                w.writerow([repr(r.t), r.decision, "" if r.d_bar is None else repr(r.d_bar), repr(r.S),
                            repr(r.energy_rw), "" if r.energy_dt is None else repr(r.energy_dt),
                            json.dumps(r.actions), ";".join(r.outage)])
        write_kpms(self.kpms, out / "kpms.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def write_kpms(kpms, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "key", "rw", "dt_raw", "dt_corr"))
        for t, key, x, y, c in kpms:
            w.writerow([repr(t), key, repr(x), repr(y), repr(c)])


def read_kpms(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(float(t), key, float(x), float(y), float(c)) for t, key, x, y, c in rows]


def summarize(kpms, eps: float = 1e-6) -> dict:
    """Per-key MAPE of raw and corrected twin output; accuracy is 100 - MAPE clipped at 0."""
    acc: dict = {}
    for _, key, x, y, c in kpms:
        a = acc.setdefault(key, [0.0, 0.0, 0])
        a[0] += abs(relative_error(y, x, eps))
        a[1] += abs(relative_error(c, x, eps))
        a[2] += 1
    out = {}
    for key, (raw, corr, n) in sorted(acc.items()):
        out[key] = {"n": n, "mape_raw": raw / n, "mape_corr": corr / n, "accuracy": max(0.0, 100.0 - corr / n)}
    return out


class ClosedLoop:
    """Single-writer orchestration of one RW instance and its twin."""

    def __init__(self, rw_config: ScenarioConfig, model, config: SupervisorConfig | None = None, out_dir=None):
        """``model`` is a trained InferenceModel or any callable mapping RW samples to a ScenarioConfig."""
        self.cfg = config or SupervisorConfig()
        self.rw_config = rw_config
        self.infer = model_inferrer(model, rw_config) if isinstance(model, InferenceModel) else model
        self.rw = init_scenario(rw_config, self.cfg.rw_seed)
        self.dt: NetworkState | None = None
        self.bank = TunerBank(self.cfg.rls)
        self.monitor = DeviationMonitor(self.cfg.deviation, rw_config.indication_periodicity)
        self.xapp = XappState(self.cfg.xapp_config)
        self.recent = deque(maxlen=self.cfg.window)
        self.report = RunReport()
        self.k = 0
        self.S_prev = 0.0
        self.last_regen: int | None = None
        self.bootstrap_at: int | None = None
        self.regen_count = 0
        self.out = Path(out_dir) if out_dir is not None else None
        self._dev_log = self._act_log = self._regen_fh = None
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            self._dev_log = DeviationLog(self.out / "deviation.csv")
            self._act_log = ActionLog(self.out / "actions.jsonl")
            self._regen_fh = open(self.out / "regenerations.jsonl", "w")

    def _scored(self, key: str) -> bool:
        metric, entity = key.split("/", 1)
        return entity == "net" or metric in self.cfg.score_ue_metrics

    def _decision(self) -> str:
        if self.last_regen is None:
            return "Regenerate" if self.k >= self.cfg.window else "Deferred"
        if self.k - self.bootstrap_at <= self.cfg.warmup:
            return "Tune"
        return decide(self.S_prev, self.k - self.last_regen > self.cfg.cooldown, self.cfg.xapp)

    def _regenerate(self, S: float):
        old = self.dt.config if self.dt is not None else None
        try:
            self.dt = regenerate(self.infer, [s for batch in self.recent for s in batch], self.rw.clock,
                                 self.rw.cell_active, self.cfg.dt_seed + self.regen_count)
        except RegenFailed as exc:
            log.warning("regeneration at t=%s failed: %s", self.rw.clock, exc)
            rec = {"t": self.rw.clock, "old_config_hash": config_hash(old), "new_config_hash": None, "S": S,
                   "error": str(exc)}
        else:
            self.regen_count += 1
            self.last_regen = self.k
            if self.bootstrap_at is None:
                self.bootstrap_at = self.k
            self.bank.reset()
            self.monitor.restart()  # MAD history is kept
            rec = {"t": self.rw.clock, "old_config_hash": config_hash(old),
                   "new_config_hash": config_hash(self.dt.config), "S": S, "num_ues": self.dt.config.num_ues}
        self.report.regenerations.append(rec)
        if self._regen_fh:
            self._regen_fh.write(json.dumps(rec) + "\n")

    def _control(self, t: float) -> list:
        acts = propose(self.xapp, attachments(self.dt), range(len(self.dt.cell_pos)), self.k,
                       self.dt.config.ho_sinr_difference)
        wake = [a for a in acts if a.kind == "CellOn"]
        main = [a for a in acts if a.kind != "CellOn"]
        applied = []
        for group, saving in ((wake, False), (main, True)):
            if not group:
                continue
            ok = evaluate_policy_in_twin(self.dt, group, self.cfg.eval_horizon, require_saving=saving)
            for a in group:
                target = "twin"
                if ok:
                    try:
                        self.rw = apply_control(self.rw, a)
                        self.dt = _apply_quietly(self.dt, a)
                        applied.append(a)
                        target = "rw"
                    except IllegalAction as exc:
                        log.info("RW rejected %s: %s", a, exc)
                if self._act_log:
                    self._act_log.write(t, a, ok, target)
        commit(self.xapp, applied, self.k)
        return [a.to_json() for a in applied]

    def step(self) -> IntervalRow:
        e_rw0 = self.rw.energy_acc.sum()
        self.rw, rw_samples = step(self.rw)
        self.k += 1
        t = self.rw.clock
        self.recent.append(rw_samples)
        thr = self.rw_config.outage_threshold
        outage = tuple(sorted(e for e, v in _serving_sinrs(rw_samples).items() if v < thr))
        energy_dt = None
        snap = None
        if self.dt is not None:
            e_dt0 = self.dt.energy_acc.sum()
            self.dt, dt_samples = step(self.dt)
            energy_dt = float(self.dt.energy_acc.sum() - e_dt0)
            x_vec, y_vec = kpm_vector(rw_samples), kpm_vector(dt_samples)
            values, corr_sinr = {}, {}
            for key, y in sorted(y_vec.items()):
                x = x_vec.get(key)
                c, _ = self.bank.step(key, y, x, self.monitor.d_prev(key))
                values[key] = (y, c, x)
                if x is not None:
                    self.report.kpms.append((t, key, x, y, c))
                if key.startswith("serving_sinr/"):
                    corr_sinr[key.split("/", 1)[1]] = c
            snap = self.monitor.observe(t, {k: v for k, v in values.items() if self._scored(k)})
            xapp_view = [dataclasses.replace(s, value=corr_sinr.get(s.entity, s.value))
                         if s.metric == "serving_sinr" else s for s in dt_samples]
            observe(self.xapp, xapp_view, attachments(self.dt))
        decision = self._decision()
        S = snap.S if snap is not None else self.S_prev
        actions = []
        if decision == "Regenerate":
            self._regenerate(S)
        elif decision == "TuneAndControl":
            actions = self._control(t)
        if snap is not None:
            self.S_prev = snap.S
            if self._dev_log:
                self._dev_log.write(snap, decision)
        row = IntervalRow(t, decision, None if snap is None else snap.d_bar, S,
                          float(self.rw.energy_acc.sum() - e_rw0), energy_dt, actions, outage)
        self.report.rows.append(row)
        return row

    def close(self):
        for h in (self._dev_log, self._act_log, self._regen_fh):
            if h:
                h.close()
        if self.out is not None:
            self.report.save(self.out)


def _apply_quietly(state: NetworkState, action) -> NetworkState:
    try:
        return apply_control(state, action)
    except IllegalAction:
        return state


def run_closed_loop(rw_config: ScenarioConfig, model, config: SupervisorConfig | None = None,
                    out_dir=None) -> RunReport:
    loop = ClosedLoop(rw_config, model, config, out_dir)
    n = steps_remaining(loop.rw)
    if loop.cfg.horizon is not None:
        n = min(n, loop.cfg.horizon)
    try:
        for _ in range(n):
            loop.step()
    finally:
        loop.close()  # a partial report is flushed on error too
    return loop.report
