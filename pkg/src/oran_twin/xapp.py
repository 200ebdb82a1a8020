"""Energy-saving xApp: smoothed-SINR handover, sleep for empty cells, periodic probe-wake."""
from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .netsim import CellOff, CellOn, ControlAction, Handover

_UE = re.compile(r"^ue(\d+)$")
_NBR = re.compile(r"^ue(\d+)@cell(\d+)$")


@dataclass(frozen=True)
class XappConfig:
    window: int = 5
    probe_interval: int = 30
    probe_duration: int = 2
    activity_db: float = 3.0

    def __post_init__(self):
        if self.probe_interval <= self.probe_duration:
            raise ValueError("probe interval must exceed probe duration")


@dataclass
class XappState:
    config: XappConfig = field(default_factory=XappConfig)
    buffers: dict = field(default_factory=dict)  # (ue, cell) -> deque of SINR reports
    last_seen: dict = field(default_factory=dict)  # (ue, cell) -> observation index
    observations: int = 0
    sleeping: set = field(default_factory=set)
    next_probe: dict = field(default_factory=dict)
    probing: dict = field(default_factory=dict)  # cell -> (end, baseline {ue: mean})
    pending_probe: dict = field(default_factory=dict)

    def mean(self, ue: int, cell: int) -> float | None:
        buf = self.buffers.get((ue, cell))
        return float(np.mean(buf)) if buf else None

    def fresh(self, ue: int, cell: int) -> bool:
        return self.last_seen.get((ue, cell)) == self.observations


def observe(state: XappState, kpms, attachments: dict) -> XappState:
    """Push serving and neighbor SINR reports into the per-(UE, cell) ring buffers."""
    state.observations += 1
    M = state.config.window
    for s in kpms:
        if s.metric == "serving_sinr":
            m = _UE.match(s.entity)
            if not m or int(m.group(1)) not in attachments:
                continue
            key = (int(m.group(1)), int(attachments[int(m.group(1))]))
        elif s.metric == "neighbor_sinr":
            m = _NBR.match(s.entity)
            if not m:
                continue
            key = (int(m.group(1)), int(m.group(2)))
        else:
            continue
        state.buffers.setdefault(key, deque(maxlen=M)).append(float(s.value))
        state.last_seen[key] = state.observations
    return state


def propose_handovers(state: XappState, attachments: dict, margin: float) -> list[ControlAction]:
    out = []
    for ue, serving in sorted(attachments.items()):
        own = state.mean(ue, serving)
        if own is None:
            continue
        best, best_mean = None, -np.inf
        for (u, c) in sorted(state.buffers):
            if u != ue or c == serving or c in state.sleeping or not state.fresh(u, c):
                continue
            m = state.mean(u, c)
            if m > best_mean:  # strict, so the lowest cell id wins ties
                best, best_mean = c, m
        if best is not None and best_mean > own + margin:
            out.append(Handover(ue, best))
    return out


def apply_handovers(attachments: dict, actions) -> dict:
    after = dict(attachments)
    for a in actions:
        if a.kind == "Handover":
            after[a.ue] = a.cell
    return after


def propose_sleep(state: XappState, attachments: dict, cells) -> list[ControlAction]:
    """CellOff for every awake, non-probing cell that serves nobody."""
    served = set(attachments.values())
    return [CellOff(c) for c in sorted(cells) if c not in state.sleeping and c not in state.probing and c not in served]


def _activity(state: XappState, cell: int, baseline: dict, attachments: dict) -> bool:
    if cell in attachments.values():
        return True
    for ue, serving in attachments.items():
        now = state.mean(ue, cell) if state.fresh(ue, cell) else None
        if now is None:
            continue
        before = baseline.get(ue)
        if before is None:
            own = state.mean(ue, serving)
            if own is not None and now > own:
                return True
        elif now - before > state.config.activity_db:
            return True
    return False


def probe_cycle(state: XappState, now: int, attachments: dict) -> list[ControlAction]:
    out = []
    for c, (end, baseline) in sorted(state.probing.items()):
        if now >= end and not _activity(state, c, baseline, attachments):
            out.append(CellOff(c))
        elif now >= end:
            del state.probing[c]  # activity: the cell stays awake
    for c in sorted(state.sleeping):
        if c not in state.probing and now >= state.next_probe.get(c, now):
            state.pending_probe[c] = {ue: state.mean(ue, c) for ue in attachments if state.mean(ue, c) is not None}
            out.append(CellOn(c))
    return out


def decide(state: XappState, kpms, attachments: dict, cells, now: int, margin: float) -> list[ControlAction]:
    """Observe one interval of reports, then run a decision round."""
    observe(state, kpms, attachments)
    return propose(state, attachments, cells, now, margin)


def propose(state: XappState, attachments: dict, cells, now: int, margin: float) -> list[ControlAction]:
    """Probe bookkeeping, handovers, then sleep over post-handover attachments."""
    probes = probe_cycle(state, now, attachments)
    handovers = propose_handovers(state, attachments, margin)
    after = apply_handovers(attachments, handovers)
    waking = {a.cell for a in probes if a.kind == "CellOn"}
    closing = {a.cell for a in probes if a.kind == "CellOff"}
    sleeps = [a for a in propose_sleep(state, after, cells) if a.cell not in waking | closing]
    return probes + handovers + sleeps


def commit(state: XappState, applied, now: int) -> None:
    """Update the cell-state mirror with the actions that were actually applied."""
    applied_on = {a.cell for a in applied if a.kind == "CellOn"}
    for c in list(state.pending_probe):
        baseline = state.pending_probe.pop(c)
        if c in applied_on:
            state.probing[c] = (now + state.config.probe_duration, baseline)
        else:
            state.next_probe[c] = now + state.config.probe_interval
    for a in applied:
        if a.kind == "CellOff":
            state.sleeping.add(a.cell)
            state.probing.pop(a.cell, None)
            state.next_probe[a.cell] = now + state.config.probe_interval
        elif a.kind == "CellOn":
            state.sleeping.discard(a.cell)


class ActionLog:
    """JSONL record of every proposed action and whether it reached the twin or the RW instance."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def write(self, t: float, action: ControlAction, validated: bool, applied_to: str):
        rec = {"t": t, **action.to_json(), "validated": validated, "applied_to": applied_to}
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
