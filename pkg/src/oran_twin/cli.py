"""Command-line entry point: generate traces, train the inference model, run the closed loop, gate reports."""
from __future__ import annotations

import csv
import fnmatch
import json
import logging
import os
import sys
from pathlib import Path

import click

from .config_inference import (
    CAT_NAMES,
    InferenceModel,
    build_training_set,
    evaluate,
    holdout_split,
    scenario_grid,
    train_quietly,
)
from .errors import ConfigError, ShapeError
from .netsim import ScenarioConfig, run, table_ii_config
from .supervisor import SupervisorConfig, read_kpms, run_closed_loop, summarize
from .telemetry import write_trace

MIN_SCENARIOS = 4  # a 25% holdout needs at least one held-out and three training scenarios


def _setup_logging():
    level = os.environ.get("OPENTWIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def load_scenario(path, duration=None) -> ScenarioConfig:
    cfg = ScenarioConfig.load(path) if path else table_ii_config()
    if duration is not None:
        cfg = cfg.replace(duration=float(duration))
    return cfg


def cmd_generate(cfg: ScenarioConfig, out: Path, seed: int) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    _, samples = run(cfg, seed)
    write_trace(samples, out / "trace.jsonl")
    cfg.save(out / "config.json")
    return out / "trace.jsonl"


def cmd_train(configs, out: Path, holdout: float = 0.25, seed: int = 0) -> dict:
    if len(configs) < MIN_SCENARIOS:
        raise ConfigError(f"training needs at least {MIN_SCENARIOS} scenarios, got {len(configs)}")
    out.mkdir(parents=True, exist_ok=True)
    pairs = build_training_set(configs)
    train_pairs, test_pairs = holdout_split(pairs, holdout, seed)
    model = train_quietly(train_pairs)
    model.save(out / "model.json")
    metrics = evaluate(model, test_pairs)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("parameter", "measure", "value"))
        for name, v in metrics.items():
            w.writerow((name, "accuracy" if name in CAT_NAMES else "mape", repr(v)))
    return metrics


def check_thresholds(summary: dict, thresholds: dict) -> list[tuple[str, float, float, bool]]:
    """Each threshold maps a key pattern (fnmatch) to a minimum accuracy in percent."""
    rows = []
    for pattern, floor in sorted(thresholds.items()):
        keys = [k for k in summary if fnmatch.fnmatch(k, pattern)]
        if not keys:
            rows.append((pattern, float("nan"), float(floor), False))
        for k in keys:
            acc = summary[k]["accuracy"]
            rows.append((k, acc, float(floor), acc >= floor))
    return rows


def plot_run(out: Path):
    """SVG overlays of RW and twin KPMs, the deviation timeline and cumulative energy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    kpms = read_kpms(out / "kpms.csv")
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    series: dict = {}
    for t, key, x, y, c in kpms:
        series.setdefault(key, []).append((t, x, y, c))
    for key, pts in series.items():
        if not (key.endswith("/net") or key.startswith("serving_sinr/")):
            continue
        t, x, y, c = zip(*pts)
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.plot(t, x, label="RW")
        ax.plot(t, y, label="twin raw", alpha=0.6)
        ax.plot(t, c, "--", label="twin corrected")
        ax.set_xlabel("time (s)")
        ax.set_ylabel(key)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"kpm_{key.replace('/', '_')}.svg")
        plt.close(fig)
    t = [float(r["t"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(t, [float(r["S"]) for r in rows])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("deviation score S")
    fig.tight_layout()
    fig.savefig(out / "deviation_score.svg")
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(7, 3))
    e_rw, e_dt, acc_rw, acc_dt = [], [], 0.0, 0.0
    for r in rows:
        acc_rw += float(r["energy_rw"])
        acc_dt += float(r["energy_dt"] or r["energy_rw"])
        e_rw.append(acc_rw)
        e_dt.append(acc_dt)
    ax.plot(t, e_rw, label="RW")
    ax.plot(t, e_dt, "--", label="twin")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("cumulative energy (J)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "energy.svg")
    plt.close(fig)


@click.group()
def main():
    _setup_logging()


@main.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), help="Scenario config JSON (default: reference deployment).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Link-level seed.")
@click.option("--duration", type=float, help="Override the scenario duration in seconds.")
def generate(scenario, out, seed, duration):
    """Run the simulator standalone and write a KPM trace."""
    path = cmd_generate(load_scenario(scenario, duration=duration), Path(out), seed)
    click.echo(str(path))


@main.command()
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Grid and holdout seed.")
@click.option("--duration", type=float, default=300.0, show_default=True, help="Seconds simulated per scenario.")
@click.option("--limit", type=int, help="Use only the first N grid scenarios.")
def train(out, seed, duration, limit):
    """Train the configuration-inference model on the scenario grid."""
    configs = scenario_grid(duration=duration, seed=seed)
    if limit is not None:
        configs = configs[:limit]
    try:
        metrics = cmd_train(configs, Path(out), seed=seed)
    except (ConfigError, ShapeError) as exc:
        raise click.ClickException(str(exc))
    for name, v in metrics.items():
        click.echo(f"{name:24s} {v:10.4f}")


@main.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=0, show_default=True, help="RW link seed; the twin uses seed+1.")
@click.option("--duration", type=float)
@click.option("--no-xapp", is_flag=True, help="Disable the energy-saving xApp.")
@click.option("--plots", is_flag=True, help="Write SVG plots next to the report.")
def twin(scenario, model_path, out, seed, duration, no_xapp, plots):
    """Run the closed loop against a simulated RW deployment."""
    cfg = load_scenario(scenario, duration=duration)
    model = InferenceModel.load(model_path)
    sc = SupervisorConfig(xapp=not no_xapp, rw_seed=seed, dt_seed=seed + 1)
    out = Path(out)
    report = run_closed_loop(cfg, model, sc, out_dir=out)
    if plots:
        plot_run(out)
    _print_summary(report.summary())


def _print_summary(summary):
    for key, s in summary.items():
        click.echo(f"{key:32s} n={s['n']:5d} mape_raw={s['mape_raw']:9.3f} mape_corr={s['mape_corr']:9.3f} "
                   f"accuracy={s['accuracy']:7.3f}")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--thresholds", type=click.Path(exists=True, dir_okay=False),
              help='JSON {"key pattern": minimum accuracy percent}.')
def report(run_dir, thresholds):
    """Recompute accuracy from stored traces; exit nonzero if any threshold fails."""
    summary = summarize(read_kpms(Path(run_dir) / "kpms.csv"))
    _print_summary(summary)
    if not thresholds:
        return
    rows = check_thresholds(summary, json.loads(Path(thresholds).read_text()))
    for key, acc, floor, ok in rows:
        click.echo(f"{'PASS' if ok else 'FAIL'} {key} accuracy {acc:.3f} >= {floor:.3f}")
    if not all(ok for *_, ok in rows):
        sys.exit(1)


if __name__ == "__main__":
    main()
