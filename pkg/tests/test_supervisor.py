import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oran_twin.config_inference import topology_from_samples
from oran_twin.deviation import DeviationConfig
from oran_twin.errors import ConfigError, RegenFailed
from oran_twin.netsim import CellOff, Handover, init_scenario, step, table_ii_config
from oran_twin.supervisor import (
    DECISIONS,
    ClosedLoop,
    SupervisorConfig,
    decide,
    evaluate_policy_in_twin,
    kpm_vector,
    read_kpms,
    regenerate,
    run_closed_loop,
    summarize,
)
from oran_twin.telemetry import KpmSample


def oracle(rw_config):
    """Inference stand-in that returns the true configuration with the observed UE count."""
    def infer(samples):
        return rw_config.replace(scheduled_events=(), num_ues=topology_from_samples(samples)["num_ues"])
    return infer


def cluster(**kw):
    d = dict(num_cells=3, mobility_model="ConstantPosition", duration=120.0)
    d.update(kw)
    return table_ii_config(**d)


class TestDecide:
    def test_alarm(self):
        assert decide(1.0, True, True) == "Regenerate"

    def test_alarm_in_cooldown(self):
        assert decide(1.0, False, True) == "Tune"

    def test_warn(self):
        assert decide(0.0, True, True) == "TuneAndControl"

    def test_middle(self):
        assert decide(0.4, True, True) == "Tune"

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0, 1), st.booleans())
    def test_disabled_xapp_never_controls(self, S, cooled):
        assert decide(S, cooled, False) != "TuneAndControl"

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SupervisorConfig(cooldown=0)
        with pytest.raises(ConfigError):
            SupervisorConfig(horizon=0)


class TestEvaluatePolicy:
    def test_sleeping_empty_cell_improves(self):
        st0 = init_scenario(cluster(), 0)
        empty = next(c for c in range(3) if not st0.attached(c))
        assert evaluate_policy_in_twin(st0, [CellOff(empty)], 10)

    def test_empty_list_degrades(self):
        assert not evaluate_policy_in_twin(init_scenario(cluster(), 0), [], 10)

    def test_outage_degrades(self):
        cfg = cluster(num_ues=1, isd_cells=2000.0, outage_threshold=10.0)
        st0 = init_scenario(cfg, 0)
        assert st0.serving[0] == 0
        acts = [Handover(0, 2), CellOff(0)]
        assert not evaluate_policy_in_twin(st0, acts, 10)
        # the same move is an energy saving, so only the outage guard rejects it
        assert evaluate_policy_in_twin(init_scenario(cluster(num_ues=1, isd_cells=2000.0), 0), acts, 10)

    def test_illegal_degrades(self):
        st0 = init_scenario(cluster(), 0)
        assert not evaluate_policy_in_twin(st0, [CellOff(int(st0.serving[0]))], 10)

    def test_wake_checked_for_safety_only(self):
        st0 = init_scenario(cluster(), 0)
        from oran_twin.netsim import CellOn, apply_control
        empty = next(c for c in range(3) if not st0.attached(c))
        asleep = apply_control(st0, CellOff(empty))
        assert not evaluate_policy_in_twin(asleep, [CellOn(empty)], 5)
        assert evaluate_policy_in_twin(asleep, [CellOn(empty)], 5, require_saving=False)


class TestRegenerate:
    def test_failure_wrapped(self):
        def broken(samples):
            raise ConfigError("no")
        with pytest.raises(RegenFailed):
            regenerate(broken, [], 10.0, [True] * 3, 1)

    def test_failure_keeps_twin(self):
        cfg = cluster(duration=40.0)
        calls = []

        def flaky(samples):
            calls.append(len(samples))
            if len(calls) > 1:
                raise ConfigError("inference failed")
            return oracle(cfg)(samples)

        loop = ClosedLoop(cfg, flaky, SupervisorConfig(cooldown=1, xapp=False))
        for _ in range(10):
            loop.step()
        twin = loop.dt
        assert twin is not None
        loop.S_prev, loop.last_regen, loop.bootstrap_at = 1.0, 0, -100
        loop.step()
        assert loop.report.regenerations[-1]["new_config_hash"] is None
        assert loop.dt.step_index == twin.step_index + 1 and loop.dt.config == twin.config

    def test_fast_forward_and_cell_states(self):
        cfg = cluster()
        twin = regenerate(lambda _: cfg, [], 7.0, [True, False, True], 3)
        assert twin.clock == 7.0 and not twin.cell_active[1] and not twin.attached(1)

    def test_cell_count_mismatch(self):
        with pytest.raises(RegenFailed):
            regenerate(lambda _: cluster(), [], 2.0, [True] * 5, 3)


def test_kpm_vector_keys():
    smp = [KpmSample(1.0, "cell0", "tb_total", 3.0), KpmSample(1.0, "cell1", "tb_total", 4.0),
           KpmSample(1.0, "ue0", "buffer_occupancy", 2.0), KpmSample(1.0, "ue1", "buffer_occupancy", 5.0),
           KpmSample(1.0, "ue0", "serving_sinr", 9.0), KpmSample(1.0, "ue0@cell1", "neighbor_sinr", 1.0)]
    v = kpm_vector(smp)
    assert v == {"tb_total/net": 7.0, "buffer_occupancy/net": 7.0, "buffer_occupancy/ue0": 2.0,
                 "buffer_occupancy/ue1": 5.0, "serving_sinr/ue0": 9.0}


def test_summary_arithmetic():
    s = summarize([(1.0, "k", 10.0, 10.5, 10.0), (2.0, "k", 20.0, 21.0, 20.0)])
    assert s["k"]["mape_raw"] == pytest.approx(5.0) and s["k"]["accuracy"] == 100.0


def test_self_twin_converges():
    cfg = table_ii_config(duration=80.0)
    rep = run_closed_loop(cfg, oracle(cfg), SupervisorConfig(xapp=False, rw_seed=0, dt_seed=0))
    regen = next(i for i, r in enumerate(rep.rows) if r.decision == "Regenerate")
    tail = [r.d_bar for r in rep.rows[regen + 1: regen + 51] if r.d_bar is not None]
    assert tail and min(tail) < SupervisorConfig().deviation.tau_warn


def test_bootstrap_and_report_consistency(tmp_path):
    cfg = cluster(duration=60.0)
    rep = run_closed_loop(cfg, oracle(cfg), SupervisorConfig(), out_dir=tmp_path)
    decisions = [r.decision for r in rep.rows]
    assert len(decisions) == 60 and set(decisions) <= set(DECISIONS)
    assert decisions[:9] == ["Deferred"] * 9 and decisions[9] == "Regenerate"
    regen_t = [r.t for r in rep.rows if r.decision == "Regenerate"]
    logged = [json.loads(x) for x in (tmp_path / "regenerations.jsonl").read_text().splitlines()]
    assert [g["t"] for g in logged] == regen_t
    assert read_kpms(tmp_path / "kpms.csv") == rep.kpms


def test_safety_every_rw_action_validated(tmp_path):
    cfg = cluster(duration=90.0)
    rep = run_closed_loop(cfg, oracle(cfg), SupervisorConfig(), out_dir=tmp_path)
    log = [json.loads(x) for x in (tmp_path / "actions.jsonl").read_text().splitlines()]
    assert log and all(a["validated"] for a in log if a["applied_to"] == "rw")
    applied = [dict(a, t=r.t) for r in rep.rows for a in r.actions]
    assert applied == [{k: v for k, v in a.items() if k not in ("validated", "applied_to")} | {"t": a["t"]}
                       for a in log if a["applied_to"] == "rw"]


def test_xapp_disabled_never_controls(tmp_path):
    cfg = cluster(duration=60.0)
    rep = run_closed_loop(cfg, oracle(cfg), SupervisorConfig(xapp=False), out_dir=tmp_path)
    assert "TuneAndControl" not in {r.decision for r in rep.rows}
    assert (tmp_path / "actions.jsonl").read_text() == ""


def test_liveness_under_persistent_alarm():
    # thresholds this tight keep S at 1 on link-level noise alone
    cfg = cluster(duration=120.0)
    sc = SupervisorConfig(cooldown=5, xapp=False, deviation=DeviationConfig(tau_warn=0.0, tau_alarm=1e-9))
    rep = run_closed_loop(cfg, oracle(cfg), sc)
    regens = [i for i, r in enumerate(rep.rows) if r.decision == "Regenerate"]
    assert len(regens) >= 3
    for a, b in zip(regens[1:], regens[2:]):
        assert b - a <= sc.cooldown + 1


def test_deterministic_reports(tmp_path):
    cfg = cluster(duration=50.0)
    for name in ("a", "b"):
        run_closed_loop(cfg, oracle(cfg), SupervisorConfig(), out_dir=tmp_path / name)
    for f in ("report.csv", "kpms.csv", "summary.json", "deviation.csv", "actions.jsonl", "regenerations.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_partial_report_flushed_on_error(tmp_path, monkeypatch):
    cfg = cluster(duration=30.0)
    loop_steps = []
    orig = ClosedLoop.step

    def boom(self):
        loop_steps.append(1)
        if len(loop_steps) == 15:
            raise RuntimeError("module failure")
        return orig(self)

    monkeypatch.setattr(ClosedLoop, "step", boom)
    with pytest.raises(RuntimeError):
        run_closed_loop(cfg, oracle(cfg), SupervisorConfig(), out_dir=tmp_path)
    assert len((tmp_path / "report.csv").read_text().splitlines()) == 15  # header plus 14 rows


def test_step_past_duration_rejected():
    st0 = init_scenario(cluster(duration=1.0), 0)
    st1, _ = step(st0)
    with pytest.raises(ValueError):
        step(st1)
