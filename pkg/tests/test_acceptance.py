"""End-to-end acceptance checks. Each test prints one PASS/FAIL line before asserting."""
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oran_twin.config_inference import CAT_NAMES, CONT_NAMES, evaluate, infer_config, split_windows
from oran_twin.netsim import run, schedule_event, table_ii_config
from oran_twin.rls import RlsConfig, batch_solution, init, update
from oran_twin.supervisor import SupervisorConfig, run_closed_loop

TESTS = Path(__file__).parent
MULTI_KPM = ("tb_total", "tb_qpsk", "tb_16qam", "tb_64qam", "tb_errors", "buffer_occupancy", "dl_prb_usage",
             "pdcp_volume")


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


def test_1_rls_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(20):
        lam = (0.9, 0.99, 1.0)[i % 3]
        gamma = (1.0, 1e3)[i % 2]
        n = int(rng.integers(1, 201))
        U = rng.normal(size=(n, 6))
        U[:, 0] = 1.0
        X = U @ rng.normal(size=6) + rng.normal(size=n)
        s = init(RlsConfig(lam=lam, gamma=gamma))
        for u, x in zip(U, X):
            s, _ = update(s, u, x, lam)
        worst = max(worst, float(np.abs(s.theta - batch_solution(U, X, lam, gamma)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5
    assert verdict(1, ok, f"max |theta_rls - theta_batch| = {worst:.2e} over 20 traces in {elapsed:.2f} s")


@pytest.fixture(scope="module")
def fidelity_run(trained_model):
    t0 = time.perf_counter()
    rep = run_closed_loop(table_ii_config(duration=600.0, seed=0), trained_model, SupervisorConfig(xapp=False))
    return rep.summary(), time.perf_counter() - t0


def test_2_serving_sinr_fidelity(verdict, fidelity_run):
    summary, elapsed = fidelity_run
    acc = {k: v["accuracy"] for k, v in summary.items() if k.startswith("serving_sinr/ue")}
    ok = len(acc) == 6 and min(acc.values()) >= 90 and elapsed < 120
    detail = ", ".join(f"{k.split('/')[1]} {a:.2f}%" for k, a in sorted(acc.items()))
    assert verdict(2, ok, f"corrected serving-SINR accuracy {detail} ({elapsed:.0f} s)")


def test_3_multi_kpm_fidelity(verdict, fidelity_run):
    summary, _ = fidelity_run
    keys = [f"{m}/net" for m in MULTI_KPM]
    mape = {k: summary[k]["mape_corr"] for k in keys}
    ok = len(mape) == 8 and max(mape.values()) <= 8
    detail = ", ".join(f"{k.split('/')[0]} {v:.2f}%" for k, v in mape.items())
    assert verdict(3, ok, f"corrected MAPE {detail}")


def test_4_drift_adaptation(verdict, trained_model):
    t0 = time.perf_counter()
    cfg = schedule_event(table_ii_config(num_ues=10, duration=600.0, seed=0), 480.0, "DeactivateUEs", [6, 7, 8, 9])
    sc = SupervisorConfig(xapp=False)
    rep = run_closed_loop(cfg, trained_model, sc)
    elapsed = time.perf_counter() - t0
    rows = rep.rows
    first = next((r.t for r in rows if 480 < r.t <= 500 and r.S > 0.15), None)
    regens = [g for g in rep.regenerations if g["t"] > 480]
    ok = first is not None and len(regens) == 1 and regens[0]["num_ues"] == 6 and elapsed < 180
    recover = None
    if regens:
        t_regen = regens[0]["t"]
        recover = next((r.t for r in rows if t_regen < r.t <= t_regen + 60
                        and r.d_bar is not None and r.d_bar < sc.deviation.tau_warn), None)
        ok = ok and recover is not None
    detail = (f"S>0.15 first at t={first}; post-drop regenerations {[(g['t'], g.get('num_ues')) for g in regens]}; "
              f"d_bar below warn at t={recover} ({elapsed:.0f} s)")
    assert verdict(4, ok, detail)


def test_5_configuration_inference(verdict, grid_split, trained_model):
    _, test_pairs = grid_split
    metrics = evaluate(trained_model, test_pairs)
    cont_ok = all(metrics[n] <= 5 for n in CONT_NAMES)
    cat_ok = all(metrics[n] == 100 for n in CAT_NAMES)
    ref = table_ii_config(seed=0)
    _, samples = run(ref, 1)
    mismatched, total = [], 0
    for k, win, _ in split_windows(samples):
        cfg, _ = infer_config(trained_model, win, duration=ref.duration)
        got, want = cfg.to_json(), ref.to_json()
        total += 1
        diff = [f for f in CONT_NAMES + CAT_NAMES + ("num_cells", "num_ues") if got[f] != want[f]]
        if diff:
            mismatched.append((k, diff))
    ok = cont_ok and cat_ok and total > 0 and not mismatched
    worst = max(CONT_NAMES, key=lambda n: metrics[n])
    detail = (f"worst continuous MAPE {worst} {metrics[worst]:.3f}%, categorical "
              f"{min(metrics[n] for n in CAT_NAMES):.0f}%, fixture windows matched {total - len(mismatched)}/{total}")
    assert verdict(5, ok, detail)


def test_6_energy_saving(verdict, trained_model):
    t0 = time.perf_counter()
    cfg = table_ii_config(num_cells=3, mobility_model="ConstantPosition", duration=600.0, seed=0)
    off = run_closed_loop(cfg, trained_model, SupervisorConfig(xapp=False))
    on = run_closed_loop(cfg, trained_model, SupervisorConfig(xapp=True))
    elapsed = time.perf_counter() - t0
    ratio = sum(r.energy_rw for r in on.rows) / sum(r.energy_rw for r in off.rows)
    covered = [r for r in on.rows if r.energy_dt is not None]
    twin_err = abs(sum(r.energy_dt for r in covered) / sum(r.energy_rw for r in covered) - 1)
    added = sum(len(set(a.outage) - set(b.outage)) for a, b in zip(on.rows, off.rows))
    n_actions = sum(len(r.actions) for r in on.rows)
    ok = ratio <= 0.6 and twin_err <= 0.05 and added == 0 and elapsed < 120
    detail = (f"energy ratio {ratio:.3f}, twin vs RW energy error {100 * twin_err:.2f}%, "
              f"{n_actions} applied actions, {added} added outages ({elapsed:.0f} s)")
    assert verdict(6, ok, detail)


PROPERTY_SUITES = [
    "test_config_inference.py::TestProjection::test_idempotent_and_optimal",
    "test_deviation.py::TestEwma::test_closed_form_and_contraction",
    "test_deviation.py::TestScore::test_monotone",
    "test_netsim.py::TestProperties::test_conservation_and_partition",
    "test_netsim.py::TestProperties::test_determinism",
    "test_xapp.py::TestHandover::test_no_oscillation",
]


def test_7_property_suites(verdict):
    t0 = time.perf_counter()
    ids = [str(TESTS / p) for p in PROPERTY_SUITES]
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *ids],
                         capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr.strip()
    ok = res.returncode == 0 and elapsed < 120
    assert verdict(7, ok, f"{len(ids)} property suites at 200 cases each: {tail}")
