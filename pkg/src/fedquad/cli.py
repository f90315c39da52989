"""Command-line entry points: run, compare, calibrate.

The FEDQUAD_SEED environment variable overrides the config seed (and the
seed base for compare). FEDQUAD_BACKEND picks the kernel backend.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from fedquad.backend import BACKEND_NAME
from fedquad.config import ConfigError, default_config, load_config
from fedquad.experiment import calibrate_cost_model, compare_policies, run_experiment
from fedquad.scheduler import POLICY_NAMES


def _load(config_path):
    if config_path is None:
        return default_config()
    try:
        return load_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(f"config error: {exc}") from exc


def _env_seed() -> int | None:
    raw = os.environ.get("FEDQUAD_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise click.ClickException(f"FEDQUAD_SEED must be an integer, got {raw!r}")


@click.group()
@click.version_option(package_name="fedquad")
def main():
    """Adaptive-depth federated LoRA fine-tuning simulator."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML or JSON experiment config (defaults apply if omitted).")
@click.option("--policy", type=click.Choice(POLICY_NAMES), default=None,
              help="Override the configured scheduling policy.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--rounds", type=int, default=None, help="Override the round budget.")
@click.option("--out", "out_dir", type=click.Path(), default="runs/latest",
              show_default=True, help="Directory for metrics.jsonl / summary.json.")
def run(config_path, policy, seed, rounds, out_dir):
    """Train one policy and write per-round metrics."""
    cfg = _load(config_path)
    env_seed = _env_seed()
    if seed is None and env_seed is not None:
        seed = env_seed
    result = run_experiment(cfg, out_dir=out_dir, policy=policy, seed=seed, rounds=rounds)
    s = result.summary
    click.echo(f"backend: {BACKEND_NAME}")
    click.echo(
        f"policy={s['policy']} seed={s['seed']} rounds={s['rounds_run']}"
        f"{' (early stop)' if s['stopped_early'] else ''}"
    )
    tta = s["time_to_target_s"]
    tta_text = f"{tta:.2f}" if tta is not None else "never"
    click.echo(f"final_accuracy={s['final_accuracy']:.4f} time_to_target_s={tta_text}")
    click.echo(
        f"total_clock_s={s['total_clock_s']:.2f} mean_waiting_s={s['mean_waiting_s']:.3f}"
    )
    click.echo(f"wrote {Path(out_dir) / 'metrics.jsonl'} and summary.json")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--policies", default="acs,max_depth,from_input,random_subset",
              show_default=True, help="Comma-separated policy names.")
@click.option("--seeds", "n_seeds", type=int, default=5, show_default=True,
              help="Number of seeds (config seed, seed+1, ...).")
@click.option("--rounds", type=int, default=None, help="Override the round budget.")
@click.option("--out", "out_dir", type=click.Path(), default="runs/compare",
              show_default=True, help="Directory for comparison.csv / timeseries.csv.")
def compare(config_path, policies, n_seeds, rounds, out_dir):
    """Run several policies on identical seeds and tabulate the comparison."""
    cfg = _load(config_path)
    env_seed = _env_seed()
    base = env_seed if env_seed is not None else cfg.seed
    policy_list = [p.strip() for p in policies.split(",") if p.strip()]
    for p in policy_list:
        if p not in POLICY_NAMES:
            raise click.ClickException(f"unknown policy {p!r}; choose from {POLICY_NAMES}")
    if n_seeds < 1:
        raise click.ClickException("--seeds must be >= 1")
    seeds = [base + i for i in range(n_seeds)]
    comparison = compare_policies(cfg, policy_list, seeds, rounds=rounds, out_dir=out_dir)
    click.echo(f"backend: {BACKEND_NAME}")
    header = f"{'policy':<14} {'seed':>5} {'final_acc':>9} {'mean_wait':>9} {'tta_rel':>9}"
    click.echo(header)
    for row in comparison["rows"]:
        tta = row["time_to_relative_target_s"]
        tta_text = f"{tta:.2f}" if tta is not None else "never"
        click.echo(
            f"{row['policy']:<14} {row['seed']:>5} {row['final_accuracy']:>9.4f} "
            f"{row['mean_waiting_s']:>9.3f} {tta_text:>9}"
        )
    click.echo(f"wrote {Path(out_dir) / 'comparison.csv'} and timeseries.csv")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), default="runs/calibration",
              show_default=True, help="Directory for cost_model.json.")
def calibrate(config_path, out_dir):
    """Fit memory/latency coefficients from instrumented sweeps."""
    cfg = _load(config_path)
    report = calibrate_cost_model(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "cost_model.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    mem = report["memory"]
    lat = report["latency"]
    click.echo(f"backend: {BACKEND_NAME}")
    click.echo(
        f"memory fit (MB): m_f={mem['m_f_mb']:.6f} m_o={mem['m_o_mb']:.6f} "
        f"m_q={mem['m_q_mb']:.6f} max_residual_bytes={mem['max_residual_bytes']:.3g}"
    )
    click.echo(
        f"latency fit (s): c_base={lat['c_base_s']:.6f} c_d={lat['c_d_s']:.6f} "
        f"c_a={lat['c_a_s']:.6f} max_residual_s={lat['max_residual_s']:.3g}"
    )
    click.echo(
        "config fragment: set [cost] m_f_mb/m_o_mb/m_q_mb from the memory fit "
        "(latency constants are wall-clock; scale to your work-unit convention)"
    )
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    sys.exit(main())
