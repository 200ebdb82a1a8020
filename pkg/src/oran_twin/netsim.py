"""Deterministic multi-cell downlink simulator emitting the KPM catalog each reporting interval.

Geometry is centered on the origin: the deployment area is the square
[-area_side/2, area_side/2]^2, cell 0 sits at (0, 0) and the remaining cells are
equally spaced on a ring of radius IntersideDistanceCells.

Randomness is counter based. ``config.seed`` fixes the site realization (UE
placement, velocities, shadowing map); the ``seed`` handed to :func:`init_scenario`
drives link-level draws (transport block errors) for that instance.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CellAsleep, ConfigError, IllegalAction, SimulatorInvariantViolation
from .telemetry import KpmSample

PRB_HZ = 180e3
TTI_S = 1e-3
PACKET_GAP_S = 500e-6
RE_PER_PRB = 12 * 14
CODING_RATE = 0.75
FIXED_TTT_INTERVALS = 2
A3_REPORT_RANGE_DB = 6.0

MOBILITY_MODELS = ("RandomDirection2d", "ConstantPosition")
HANDOVER_MODES = ("FixedTtt", "Dynamic")

# JSON name -> attribute name, in Table II order
CONTINUOUS_FIELDS = {
    "OutageThreshold": "outage_threshold",
    "Bandwidth": "bandwidth",
    "CenterFrequency": "center_frequency",
    "IntersideDistanceCells": "isd_cells",
    "IntersideDistanceUEs": "isd_ues",
    "Speed_Min": "speed_min",
    "Speed_Max": "speed_max",
    "PacketSize": "packet_size",
    "BufferSize": "buffer_size",
    "HoSinrDifference": "ho_sinr_difference",
    "IndicationPeriodicity": "indication_periodicity",
}
CATEGORICAL_FIELDS = {
    "MobilityModel": ("mobility_model", MOBILITY_MODELS),
    "HandoverMode": ("handover_mode", HANDOVER_MODES),
}
RUNTIME_FIELDS = ("num_cells", "num_ues", "area_side", "duration", "seed", "scheduled_events")

BOX_BOUNDS = {
    "OutageThreshold": (-20.0, 10.0),
    "Bandwidth": (1.4e6, 100e6),
    "CenterFrequency": (0.6e9, 7.125e9),
    "IntersideDistanceCells": (50.0, 2000.0),
    "IntersideDistanceUEs": (10.0, 2000.0),
    "Speed_Min": (0.0, 30.0),
    "Speed_Max": (0.0, 30.0),
    "PacketSize": (32.0, 9000.0),
    "BufferSize": (1.0, 10000.0),
    "HoSinrDifference": (0.0, 20.0),
    "IndicationPeriodicity": (0.01, 10.0),
}

TABLE_II = {
    "OutageThreshold": -5.0,
    "Bandwidth": 25e6,
    "CenterFrequency": 3.97e9,
    "IntersideDistanceCells": 600.0,
    "IntersideDistanceUEs": 100.0,
    "Speed_Min": 2.0,
    "Speed_Max": 5.0,
    "PacketSize": 128.0,
    "BufferSize": 50.0,
    "HoSinrDifference": 5.0,
    "IndicationPeriodicity": 1.0,
    "MobilityModel": "RandomDirection2d",
    "HandoverMode": "FixedTtt",
}


@dataclass(frozen=True)
class ScheduledEvent:
    t: float
    kind: str  # DeactivateUEs | ActivateUEs
    ues: tuple[int, ...]

    def to_json(self):
        return {"t": self.t, "event": self.kind, "ues": list(self.ues)}


@dataclass(frozen=True)
class ScenarioConfig:
    outage_threshold: float
    bandwidth: float
    center_frequency: float
    isd_cells: float
    isd_ues: float
    speed_min: float
    speed_max: float
    packet_size: float
    buffer_size: float
    ho_sinr_difference: float
    indication_periodicity: float
    mobility_model: str = "RandomDirection2d"
    handover_mode: str = "FixedTtt"
    num_cells: int = 5
    num_ues: int = 6
    area_side: float = 4000.0
    duration: float = 600.0
    seed: int = 0
    scheduled_events: tuple[ScheduledEvent, ...] = ()

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name, attr in CONTINUOUS_FIELDS.items():
            v = getattr(self, attr)
            lo, hi = BOX_BOUNDS[name]
            if not (isinstance(v, (int, float)) and math.isfinite(v) and lo <= v <= hi):
                raise ConfigError(f"{name}={v!r} outside [{lo}, {hi}]")
        if self.speed_min > self.speed_max:
            raise ConfigError(f"Speed_Min {self.speed_min} > Speed_Max {self.speed_max}")
        for name, (attr, allowed) in CATEGORICAL_FIELDS.items():
            if getattr(self, attr) not in allowed:
                raise ConfigError(f"{name}={getattr(self, attr)!r} not in {allowed}")
        if int(self.num_cells) != self.num_cells or self.num_cells < 1:
            raise ConfigError(f"num_cells must be an integer >= 1, got {self.num_cells}")
        if int(self.num_ues) != self.num_ues or self.num_ues < 0:
            raise ConfigError(f"num_ues must be an integer >= 0, got {self.num_ues}")
        if self.area_side <= 0 or self.duration < 0:
            raise ConfigError("area_side must be positive and duration nonnegative")
        if self.isd_cells > self.area_side / 2 and self.num_cells > 1:
            raise ConfigError("ring of cells does not fit in the area")
        for ev in self.scheduled_events:
            if ev.kind not in ("DeactivateUEs", "ActivateUEs"):
                raise ConfigError(f"unknown event {ev.kind!r}")
            bad = [u for u in ev.ues if not 0 <= u < self.num_ues]
            if bad:
                raise ConfigError(f"event at t={ev.t} names unknown UE ids {bad}")

    @property
    def total_prbs(self) -> int:
        return int(self.bandwidth // PRB_HZ)

    @property
    def n_tti(self) -> int:
        return max(1, round(self.indication_periodicity / TTI_S))

    def continuous_vector(self) -> np.ndarray:
        return np.array([getattr(self, a) for a in CONTINUOUS_FIELDS.values()], dtype=float)

    def to_json(self) -> dict:
        d = {name: getattr(self, attr) for name, attr in CONTINUOUS_FIELDS.items()}
        d.update({name: getattr(self, attr) for name, (attr, _) in CATEGORICAL_FIELDS.items()})
        d.update(
            num_cells=self.num_cells,
            num_ues=self.num_ues,
            area_side=self.area_side,
            duration=self.duration,
            seed=self.seed,
            scheduled_events=[ev.to_json() for ev in self.scheduled_events],
        )
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ScenarioConfig":
        known = set(CONTINUOUS_FIELDS) | set(CATEGORICAL_FIELDS) | set(RUNTIME_FIELDS)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
        missing = (set(CONTINUOUS_FIELDS) | set(CATEGORICAL_FIELDS) | {"num_cells", "num_ues"}) - set(d)
        if missing:
            raise ConfigError(f"missing configuration keys {sorted(missing)}")
        kw = {attr: float(d[name]) for name, attr in CONTINUOUS_FIELDS.items()}
        kw.update({attr: d[name] for name, (attr, _) in CATEGORICAL_FIELDS.items()})
        kw["num_cells"] = int(d["num_cells"])
        kw["num_ues"] = int(d["num_ues"])
        for k in ("area_side", "duration"):
            if k in d:
                kw[k] = float(d[k])
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        try:
            kw["scheduled_events"] = tuple(
                ScheduledEvent(float(e["t"]), e["event"], tuple(int(u) for u in e["ues"]))
                for e in d.get("scheduled_events", [])
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed scheduled event: {exc}") from None
        return cls(**kw)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


def table_ii_config(**overrides) -> ScenarioConfig:
    d = dict(TABLE_II, num_cells=5, num_ues=6)
    cfg = ScenarioConfig.from_json(d)
    return cfg.replace(**overrides) if overrides else cfg


def schedule_event(config: ScenarioConfig, t: float, kind: str, ues) -> ScenarioConfig:
    """Return a config with one more event; events at equal t fire in insertion order."""
    if not t < config.duration:
        raise ConfigError(f"event time {t} not before duration {config.duration}")
    ev = ScheduledEvent(float(t), kind, tuple(int(u) for u in ues))
    return config.replace(scheduled_events=config.scheduled_events + (ev,))


@dataclass(frozen=True)
class EnergyModel:
    p_active_base: float = 130.0
    k_prb: float = 0.4
    p_sleep: float = 15.0

    def __post_init__(self):
        if not 0 < self.p_sleep < self.p_active_base:
            raise ConfigError("need 0 < p_sleep < p_active_base")


@dataclass(frozen=True)
class RadioParams:
    p_tx_dbm: float = 30.0
    noise_dbm_hz: float = -174.0
    shadow_sigma_db: float = 4.0
    shadow_grid_m: float = 50.0


@dataclass(frozen=True)
class ControlAction:
    kind: str  # Handover | CellOff | CellOn
    cell: int
    ue: int | None = None

    def to_json(self):
        d = {"kind": self.kind, "cell": self.cell}
        if self.ue is not None:
            d["ue"] = self.ue
        return d


def Handover(ue: int, target_cell: int) -> ControlAction:
    return ControlAction("Handover", int(target_cell), int(ue))


def CellOff(cell: int) -> ControlAction:
    return ControlAction("CellOff", int(cell))


def CellOn(cell: int) -> ControlAction:
    return ControlAction("CellOn", int(cell))


@dataclass
class NetworkState:
    config: ScenarioConfig
    seed: int
    step_index: int
    cell_pos: np.ndarray
    cell_active: np.ndarray
    sleep_timer: np.ndarray
    rr_offset: np.ndarray
    ue_pos: np.ndarray
    ue_vel: np.ndarray
    serving: np.ndarray
    ue_active: np.ndarray
    buffer: np.ndarray
    ttt: np.ndarray
    energy_acc: np.ndarray
    fired: tuple[int, ...] = ()
    radio: RadioParams = field(default_factory=RadioParams)
    energy: EnergyModel = field(default_factory=EnergyModel)

    @property
    def clock(self) -> float:
        return self.step_index * self.config.indication_periodicity

    def copy(self) -> "NetworkState":
        arrays = {
            f.name: getattr(self, f.name).copy()
            for f in dataclasses.fields(self)
            if isinstance(getattr(self, f.name), np.ndarray)
        }
        return dataclasses.replace(self, **arrays)

    def attached(self, cell: int) -> list[int]:
        return [int(u) for u in np.flatnonzero((self.serving == cell) & self.ue_active)]

    def check_invariants(self):
        for u in np.flatnonzero(self.ue_active):
            c = self.serving[u]
            if c >= 0 and not self.cell_active[c]:
                raise SimulatorInvariantViolation(f"ue{u} served by sleeping cell{c}")
        if np.any(self.buffer < 0):
            raise SimulatorInvariantViolation("negative buffer")


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


_PLACE, _SHADOW, _LINK = 1, 2, 3


@lru_cache(maxsize=200_000)
def _shadow_draw(site_seed: int, ue: int, cell: int, gx: int, gy: int) -> float:
    return float(_rng(site_seed, _SHADOW, ue, cell, gx & 0xFFFF, gy & 0xFFFF).standard_normal())


def path_loss_db(d, fc_hz):
    return 32.4 + 21.0 * np.log10(np.maximum(d, 1.0)) + 20.0 * np.log10(fc_hz / 1e9)


def _shadowing(state: NetworkState) -> np.ndarray:
    r = state.radio
    U, C = len(state.ue_pos), len(state.cell_pos)
    if r.shadow_sigma_db == 0 or U == 0:
        return np.zeros((U, C))
    g = np.floor(state.ue_pos / r.shadow_grid_m).astype(np.int64)
    out = np.empty((U, C))
    for u in range(U):
        for c in range(C):
            out[u, c] = _shadow_draw(state.config.seed, u, c, int(g[u, 0]), int(g[u, 1]))
    return r.shadow_sigma_db * out


def rx_power_dbm(state: NetworkState) -> np.ndarray:
    """Received power (dBm) of every cell at every UE, shape (UEs, cells)."""
    d = np.linalg.norm(state.ue_pos[:, None, :] - state.cell_pos[None, :, :], axis=2)
    return state.radio.p_tx_dbm - path_loss_db(d, state.config.center_frequency) - _shadowing(state)


def noise_mw(state: NetworkState) -> float:
    return 10 ** (state.radio.noise_dbm_hz / 10) * state.config.bandwidth


def sinr_matrix(state: NetworkState, rx: np.ndarray | None = None) -> np.ndarray:
    """SINR (dB) of every UE towards every cell; -inf towards sleeping cells."""
    if rx is None:
        rx = rx_power_dbm(state)
    lin = 10 ** (rx / 10) * state.cell_active[None, :]
    total = lin.sum(axis=1, keepdims=True)
    interference = total - lin
    with np.errstate(divide="ignore"):
        out = rx - 10 * np.log10(noise_mw(state) + interference)
    out[:, ~state.cell_active] = -np.inf
    return out


def sinr(ue: int, cell: int, state: NetworkState) -> float:
    if not state.cell_active[cell]:
        raise CellAsleep(f"cell{cell} is asleep")
    return float(sinr_matrix(state)[ue, cell])


def mcs_class(sinr_db: float) -> str:
    if sinr_db < 5.0:
        return "qpsk"
    if sinr_db < 15.0:
        return "16qam"
    return "64qam"


BITS_PER_SYMBOL = {"qpsk": 2, "16qam": 4, "64qam": 6}


def bytes_per_prb(sinr_db: float) -> float:
    """Payload bytes one PRB carries in one TTI."""
    return RE_PER_PRB * BITS_PER_SYMBOL[mcs_class(sinr_db)] * CODING_RATE / 8


def bler(sinr_db: float) -> float:
    return 0.10 if min(abs(sinr_db - 5.0), abs(sinr_db - 15.0)) < 2.0 else 0.01


def _ring_positions(config: ScenarioConfig) -> np.ndarray:
    pos = np.zeros((config.num_cells, 2))
    n_ring = config.num_cells - 1
    for k in range(n_ring):
        a = 2 * math.pi * k / n_ring
        pos[k + 1] = (config.isd_cells * math.cos(a), config.isd_cells * math.sin(a))
    return pos


def _place_ue(config: ScenarioConfig, u: int):
    rng = _rng(config.seed, _PLACE, u)
    r = config.isd_ues * math.sqrt(rng.random())
    phi = 2 * math.pi * rng.random()
    speed = rng.uniform(config.speed_min, config.speed_max)
    heading = 2 * math.pi * rng.random()
    pos = (r * math.cos(phi), r * math.sin(phi))
    if config.mobility_model == "ConstantPosition":
        vel = (0.0, 0.0)
    else:
        vel = (speed * math.cos(heading), speed * math.sin(heading))
    return pos, vel


def init_scenario(
    config: ScenarioConfig,
    seed: int = 0,
    energy: EnergyModel | None = None,
    radio: RadioParams | None = None,
) -> NetworkState:
    try:
        config.validate()
    except ConfigError:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        raise ConfigError(str(exc)) from exc
    U, C = config.num_ues, config.num_cells
    ue_pos = np.zeros((U, 2))
    ue_vel = np.zeros((U, 2))
    for u in range(U):
        ue_pos[u], ue_vel[u] = _place_ue(config, u)
    state = NetworkState(
        config=config,
        seed=int(seed),
        step_index=0,
        cell_pos=_ring_positions(config),
        cell_active=np.ones(C, dtype=bool),
        sleep_timer=np.zeros(C, dtype=np.int64),
        rr_offset=np.zeros(C, dtype=np.int64),
        ue_pos=ue_pos,
        ue_vel=ue_vel,
        serving=np.full(U, -1, dtype=np.int64),
        ue_active=np.ones(U, dtype=bool),
        buffer=np.zeros(U),
        ttt=np.zeros(U, dtype=np.int64),
        energy_acc=np.zeros(C),
        radio=radio or RadioParams(),
        energy=energy or EnergyModel(),
    )
    if U:
        state.serving[:] = np.argmax(sinr_matrix(state), axis=1)
    return state


def _reflect(x: np.ndarray, v: np.ndarray, half: float):
    """Fold positions back into [-half, half] with specular reflection of velocity."""
    period = 4 * half
    y = np.mod(x + half, period)
    over = y > 2 * half
    y = np.where(over, period - y, y)
    return y - half, np.where(over, -v, v)


def _move(state: NetworkState, dt: float):
    half = state.config.area_side / 2
    for axis in (0, 1):
        # a step of at most a few area widths, so folding handles any number of bounces
        x = state.ue_pos[:, axis] + state.ue_vel[:, axis] * dt
        state.ue_pos[:, axis], state.ue_vel[:, axis] = _reflect(x, state.ue_vel[:, axis], half)


def _fire_events(state: NetworkState, now: float):
    fired = list(state.fired)
    for i, ev in enumerate(state.config.scheduled_events):
        if i in fired or ev.t > now + 1e-9:
            continue
        for u in ev.ues:
            if ev.kind == "DeactivateUEs" and state.ue_active[u]:
                state.ue_active[u] = False
                state.serving[u] = -1
                state.buffer[u] = 0.0
                state.ttt[u] = 0
            elif ev.kind == "ActivateUEs" and not state.ue_active[u]:
                state.ue_active[u] = True
        fired.append(i)
    state.fired = tuple(fired)


def _attach(state: NetworkState, S: np.ndarray):
    cfg = state.config
    if not state.cell_active.any():
        state.serving[:] = -1
        return
    for u in np.flatnonzero(state.ue_active):
        best = int(np.argmax(S[u]))  # argmax takes the lowest id on ties
        c = state.serving[u]
        if c < 0 or not state.cell_active[c] or S[u, c] < cfg.outage_threshold:
            state.serving[u] = best
            state.ttt[u] = 0
            continue
        if best != c and S[u, best] > S[u, c] + cfg.ho_sinr_difference:
            state.ttt[u] += 1
            if cfg.handover_mode == "Dynamic" or state.ttt[u] >= FIXED_TTT_INTERVALS:
                state.serving[u] = best
                state.ttt[u] = 0
        else:
            state.ttt[u] = 0


def step(state: NetworkState, config: ScenarioConfig | None = None) -> tuple[NetworkState, list[KpmSample]]:
    """Advance one reporting interval and return the new state with its KPM reports."""
    config = config or state.config
    dt = config.indication_periodicity
    if (state.step_index + 1) * dt > config.duration + 1e-9:
        raise ValueError(f"clock {state.clock} + {dt} exceeds duration {config.duration}")
    s = state.copy()
    s.config = config
    s.step_index += 1
    now = s.clock

    _move(s, dt)
    _fire_events(s, now)
    rx = rx_power_dbm(s)
    S = sinr_matrix(s, rx)
    _attach(s, S)

    U, C = len(s.ue_pos), len(s.cell_pos)
    n_tti = config.n_tti
    arrivals = dt / PACKET_GAP_S * config.packet_size
    per_tti_arrival = arrivals / n_tti
    cap = config.buffer_size * config.packet_size
    total = config.total_prbs
    rng = _rng(s.seed, _LINK, s.step_index)

    prb = np.zeros(U)
    served = np.zeros(U)
    buf_report = np.zeros(U)
    cell_rows = []
    for c in range(C):
        ues = s.attached(c)
        row = dict.fromkeys(("dl_prb_usage", "active_ues", "pdcp_volume", "tb_total", "tb_qpsk", "tb_16qam", "tb_64qam", "tb_errors"), 0.0)
        if s.cell_active[c]:
            s.sleep_timer[c] = 0
        else:
            s.sleep_timer[c] += 1
        if ues:
            # round robin over every backlogged UE: traffic arrives each TTI, so all are backlogged
            n = len(ues)
            base, rem = divmod(total, n)
            start = int(s.rr_offset[c]) % n
            extra = {ues[(start + i) % n] for i in range(rem)}
            s.rr_offset[c] = (start + rem) % n
            for u in ues:
                alloc = base + (1 if u in extra else 0)
                prb[u] = alloc
                sv = float(S[u, c])
                capacity = alloc * bytes_per_prb(sv) * n_tti
                avail = s.buffer[u] + arrivals
                out = min(capacity, avail)
                served[u] = out
                s.buffer[u] = min(cap, avail - out)
                buf_report[u] = min(cap, s.buffer[u] + per_tti_arrival)
                tbs = n_tti if alloc > 0 else 0
                errs = int(rng.binomial(tbs, bler(sv))) if tbs else 0
                row["tb_total"] += tbs
                row["tb_" + mcs_class(sv)] += tbs
                row["tb_errors"] += errs
                row["pdcp_volume"] += out
                row["dl_prb_usage"] += alloc
            row["active_ues"] = float(n)
        if row["dl_prb_usage"] > total:
            raise SimulatorInvariantViolation(f"cell{c} allocated {row['dl_prb_usage']} > {total} PRBs")
        e = s.energy
        power = e.p_active_base + e.k_prb * row["dl_prb_usage"] if s.cell_active[c] else e.p_sleep
        s.energy_acc[c] += power * dt
        cell_rows.append(row)

    s.check_invariants()
    samples = []
    for c, row in enumerate(cell_rows):
        for metric, v in row.items():
            samples.append(KpmSample(now, f"cell{c}", metric, float(v)))
    for u in np.flatnonzero(s.ue_active):
        c = int(s.serving[u])
        if c < 0:
            continue
        ent = f"ue{u}"
        samples.append(KpmSample(now, ent, "prb_alloc", float(prb[u])))
        samples.append(KpmSample(now, ent, "dl_pdcp_throughput", float(served[u] / dt)))
        samples.append(KpmSample(now, ent, "serving_sinr", float(S[u, c])))
        samples.append(KpmSample(now, ent, "buffer_occupancy", float(buf_report[u])))
        samples.append(KpmSample(now, ent, "pdcp_volume", float(served[u])))
        for n in range(C):
            if n == c or not s.cell_active[n]:
                continue
            if config.handover_mode == "FixedTtt" and S[u, n] < S[u, c] - A3_REPORT_RANGE_DB:
                continue
            samples.append(KpmSample(now, f"{ent}@cell{n}", "neighbor_sinr", float(S[u, n])))
    return s, samples


def apply_control(state: NetworkState, action: ControlAction) -> NetworkState:
    s = state.copy()
    C = len(s.cell_pos)
    if not 0 <= action.cell < C:
        raise IllegalAction(f"unknown cell {action.cell}")
    if action.kind == "Handover":
        u = action.ue
        if u is None or not 0 <= u < len(s.ue_pos) or not s.ue_active[u]:
            raise IllegalAction(f"handover of unknown or inactive UE {u}")
        if not s.cell_active[action.cell]:
            raise IllegalAction(f"handover target cell{action.cell} is asleep")
        s.serving[u] = action.cell
        s.ttt[u] = 0
    elif action.kind == "CellOff":
        if s.attached(action.cell):
            raise IllegalAction(f"cell{action.cell} still serves UEs {s.attached(action.cell)}")
        s.cell_active[action.cell] = False
    elif action.kind == "CellOn":
        s.cell_active[action.cell] = True
    else:
        raise IllegalAction(f"unknown action kind {action.kind!r}")
    return s


def steps_remaining(state: NetworkState) -> int:
    cfg = state.config
    return int(math.floor(cfg.duration / cfg.indication_periodicity + 1e-9)) - state.step_index


def run(config: ScenarioConfig, seed: int | None = None, state: NetworkState | None = None):
    """Run to the configured duration; returns (final state, all samples)."""
    state = state or init_scenario(config, config.seed if seed is None else seed)
    out = []
    for _ in range(steps_remaining(state)):
        state, samples = step(state)
        out.extend(samples)
    return state, out


def advance(state: NetworkState, until: float) -> NetworkState:
    """Step silently until the clock reaches ``until``."""
    while state.clock + 1e-9 < until:
        state, _ = step(state)
    return state
