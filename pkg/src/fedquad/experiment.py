"""End-to-end experiment orchestration: fleet construction, training runs,
policy comparison, and cost-model calibration.

A run is a pure function of (config, seed): every random decision flows from
one root stream forked in a fixed order, so reruns reproduce metrics byte for
byte. Outputs are metrics.jsonl (one object per round), summary.json, and,
for comparisons, comparison.csv plus a long-form timeseries.csv.

Simulated time uses the cost model's latency law; communication time is not
modeled. Time-to-target is the simulated clock at the first evaluation
reaching the target accuracy, while early stopping requires the target to be
sustained for a configured number of consecutive evaluations.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedquad import federation, model as model_mod, workload
from fedquad.backend import BACKEND_NAME
from fedquad.config import DEVICE_CLASSES, ExperimentConfig, config_to_dict
from fedquad.federation import (
    ServerState,
    SimDevice,
    TrainParams,
    init_server,
    run_round,
)
from fedquad.quant import QuantSpec, full_bytes, stored_bytes
from fedquad.resource import Configuration, CostModel, DeviceProfile, estimate_memory
from fedquad.rng import RngStream
from fedquad.scheduler import RewardParams

MB = float(2**20)


def derive_cost_model(cfg: ExperimentConfig) -> CostModel:
    """Fill unset cost coefficients from model/training dimensions.

    Memory coefficients are exact by construction of the activation store:
    each trainable layer saves four (batch, hidden) float64 tensors plus two
    per-row norm stats; quantizing a layer replaces those four tensors with
    block-int8 codes; the head input is always saved in full.
    """
    n = cfg.training.batch_size
    h = cfg.model.hidden
    spec = QuantSpec(block=cfg.model.quant_block, rounding=cfg.model.quant_rounding)
    act = full_bytes((n, h))
    stats = 2 * full_bytes((n, 1))
    m_o = (4 * act + stats) / MB
    m_q = 4 * (act - stored_bytes((n, h), spec)) / MB
    m_f = act / MB
    c_base = cfg.cost.c_base
    c_d = cfg.cost.c_d
    if cfg.cost.c_a is None:
        full = c_base + c_d * cfg.model.layers
        c_a = 0.36 * full / max(1, cfg.model.layers - 1)
    else:
        c_a = cfg.cost.c_a
    return CostModel(
        m_f=cfg.cost.m_f_mb if cfg.cost.m_f_mb is not None else m_f,
        m_o=cfg.cost.m_o_mb if cfg.cost.m_o_mb is not None else m_o,
        m_q=cfg.cost.m_q_mb if cfg.cost.m_q_mb is not None else m_q,
        c_base=c_base,
        c_d=c_d,
        c_a=c_a,
    )


@dataclass
class Fleet:
    devices: list[SimDevice]
    server: ServerState
    cost_model: CostModel
    trainset: workload.Dataset
    testset: workload.Dataset
    policy_rng: RngStream


def build_fleet(cfg: ExperimentConfig, seed: int) -> Fleet:
    """Deterministically materialize model, data, partition, and devices."""
    root = RngStream(seed)
    model_rng = root.fork()
    data_rng = root.fork()
    part_rng = root.fork()
    fleet_rng = root.fork()
    policy_rng = root.fork()

    spec = QuantSpec(block=cfg.model.quant_block, rounding=cfg.model.quant_rounding)
    base = model_mod.init_model(
        model_rng,
        n_layers=cfg.model.layers,
        hidden=cfg.model.hidden,
        classes=cfg.model.classes,
        rank=cfg.model.rank,
        alpha=cfg.model.alpha,
        base_scale=cfg.model.base_scale,
        depth_taper=cfg.model.depth_taper,
        quant_spec=spec,
    )

    total = cfg.workload.train_samples + cfg.workload.test_samples
    full = workload.generate_task(
        data_rng,
        n_samples=total,
        dim=cfg.model.hidden,
        classes=cfg.model.classes,
        sigma=cfg.workload.sigma,
        noise=cfg.workload.noise,
        min_center_distance=cfg.workload.min_center_distance,
    )
    train = workload.take(full, list(range(cfg.workload.train_samples)))
    test = workload.take(full, list(range(cfg.workload.train_samples, total)))

    cm = derive_cost_model(cfg)
    n_devices = sum(getattr(cfg.fleet, name).count for name in DEVICE_CLASSES)
    plan = workload.dirichlet_partition(
        part_rng, train, n_devices, cfg.workload.dirichlet_alpha
    )

    devices: list[SimDevice] = []
    dev_id = 0
    for name in DEVICE_CLASSES:
        klass = getattr(cfg.fleet, name)
        lo, hi = klass.depth_range
        levels = [
            estimate_memory(cm, Configuration(depth, 0)) for depth in range(lo, hi + 1)
        ]
        for _ in range(klass.count):
            profile = DeviceProfile(
                device_id=dev_id,
                device_class=name,
                memory_levels=levels,
                mode_table=list(klass.modes),
                rng=fleet_rng.fork(),
            )
            devices.append(
                SimDevice(
                    profile=profile,
                    model=model_mod.clone_model(base),
                    data=workload.take(train, plan.indices[dev_id]),
                    train_rng=root.fork(),
                    quant_rng=root.fork(),
                )
            )
            dev_id += 1
    server = init_server(base)
    return Fleet(
        devices=devices,
        server=server,
        cost_model=cm,
        trainset=train,
        testset=test,
        policy_rng=policy_rng,
    )


@dataclass
class RunResult:
    records: list[federation.RoundRecord]
    summary: dict
    config: dict


def _round_row(rec: federation.RoundRecord, time_to_target) -> dict:
    return {
        "round": rec.round_index,
        "clock_s": rec.clock_s,
        "t_round_s": rec.t_round_s,
        "waiting_s": rec.waiting_s,
        "t_avg_s": rec.t_avg_s,
        "accuracy": rec.accuracy,
        "mean_loss": rec.mean_loss,
        "time_to_target_s": time_to_target,
        "oom_device_ids": rec.oom_device_ids,
        "devices": [dataclasses.asdict(d) for d in rec.devices],
    }


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    policy: str | None = None,
    seed: int | None = None,
    rounds: int | None = None,
    early_stop: bool = True,
) -> RunResult:
    """Train for the configured budget; optionally write metrics files."""
    policy = policy if policy is not None else cfg.policy
    seed = seed if seed is not None else cfg.seed
    budget = rounds if rounds is not None else cfg.rounds
    fleet = build_fleet(cfg, seed)
    params = TrainParams(
        lr=cfg.training.lr,
        batch_size=cfg.training.batch_size,
        local_epochs=cfg.training.local_epochs,
        optimizer=cfg.training.optimizer,
        weight_decay=cfg.training.weight_decay,
        cosine_lr=cfg.training.cosine_lr,
        total_rounds=budget,
    )
    reward_params = RewardParams(
        c=cfg.reward.c,
        floor_fraction=cfg.reward.floor_fraction,
        theta=cfg.reward.theta,
    )
    records: list[federation.RoundRecord] = []
    time_to_target = None
    sustained = 0
    stopped_early = False
    for _ in range(budget):
        rec = run_round(
            fleet.server,
            fleet.devices,
            policy,
            fleet.cost_model,
            params,
            fleet.testset,
            reward_params=reward_params,
            policy_rng=fleet.policy_rng,
            fixed_depth=cfg.fixed_depth,
            weighting=cfg.aggregation,
            model_rank=cfg.model.rank,
        )
        records.append(rec)
        if rec.accuracy >= cfg.target_accuracy:
            if time_to_target is None:
                time_to_target = rec.clock_s
            sustained += 1
        else:
            sustained = 0
        if early_stop and sustained >= cfg.early_stop_patience:
            stopped_early = True
            break
    summary = {
        "policy": policy,
        "seed": seed,
        "backend": BACKEND_NAME,
        "rounds_run": len(records),
        "round_budget": budget,
        "stopped_early": stopped_early,
        "final_accuracy": records[-1].accuracy,
        "best_accuracy": max(r.accuracy for r in records),
        "target_accuracy": cfg.target_accuracy,
        "time_to_target_s": time_to_target,
        "total_clock_s": records[-1].clock_s,
        "mean_waiting_s": float(np.mean([r.waiting_s for r in records])),
        "mean_round_s": float(np.mean([r.t_round_s for r in records])),
        "total_oom_violations": sum(len(r.oom_device_ids) for r in records),
    }
    result = RunResult(records=records, summary=summary, config=config_to_dict(cfg))
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def write_run(result: RunResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tta = result.summary["time_to_target_s"]
    target = result.summary["target_accuracy"]
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        watermark = None
        for rec in result.records:
            if watermark is None and rec.accuracy >= target:
                watermark = rec.clock_s
            fh.write(json.dumps(_round_row(rec, watermark)) + "\n")
        assert watermark == tta
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({"summary": result.summary, "config": result.config}, fh, indent=2)


def first_hit_clock(records: list[federation.RoundRecord], target: float):
    """Simulated clock at the first eval with accuracy >= target, else None."""
    for rec in records:
        if rec.accuracy >= target:
            return rec.clock_s
    return None


def compare_policies(
    cfg: ExperimentConfig,
    policies: list[str],
    seeds: list[int],
    rounds: int | None = None,
    out_dir=None,
) -> dict:
    """Run each policy on identical fleets/seeds, full budget (no early stop).

    Returns {"runs": {(policy, seed): RunResult}, "rows": comparison rows}.
    Per-seed relative targets (minimum final accuracy across policies) give
    every policy a reachable time-to-accuracy for fair pacing comparisons.
    """
    runs: dict[tuple[str, int], RunResult] = {}
    for seed in seeds:
        for policy in policies:
            runs[(policy, seed)] = run_experiment(
                cfg,
                policy=policy,
                seed=seed,
                rounds=rounds,
                early_stop=False,
            )
    rows = []
    for seed in seeds:
        rel_target = min(runs[(p, seed)].summary["final_accuracy"] for p in policies)
        for policy in policies:
            result = runs[(policy, seed)]
            rows.append(
                {
                    "policy": policy,
                    "seed": seed,
                    "final_accuracy": result.summary["final_accuracy"],
                    "best_accuracy": result.summary["best_accuracy"],
                    "mean_waiting_s": result.summary["mean_waiting_s"],
                    "total_clock_s": result.summary["total_clock_s"],
                    "time_to_target_s": result.summary["time_to_target_s"],
                    "relative_target": rel_target,
                    "time_to_relative_target_s": first_hit_clock(
                        result.records, rel_target
                    ),
                    "rounds": result.summary["rounds_run"],
                }
            )
    out = {"runs": runs, "rows": rows}
    if out_dir is not None:
        write_comparison(out, out_dir)
    return out


def write_comparison(comparison: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = comparison["rows"]
    fields = list(rows[0].keys())
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    with open(out / "timeseries.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["policy", "seed", "round", "clock_s", "t_round_s", "waiting_s", "accuracy", "mean_loss"]
        )
        for (policy, seed), result in comparison["runs"].items():
            for rec in result.records:
                writer.writerow(
                    [
                        policy,
                        seed,
                        rec.round_index,
                        rec.clock_s,
                        rec.t_round_s,
                        rec.waiting_s,
                        rec.accuracy,
                        rec.mean_loss,
                    ]
                )


def calibrate_cost_model(cfg: ExperimentConfig, timing_repeats: int = 3) -> dict:
    """Measure the activation store and wall time over every (d, a), then fit.

    Memory: least-squares of peak bytes on [1, d, -a]; the store is affine in
    (d, a) by construction so residuals are ~0. Latency: same design on
    median wall seconds per batch (throughput 1.0 reference). Returns the
    fitted coefficients (MB / seconds) with residuals and raw samples.
    """
    rng = RngStream(cfg.seed)
    model_rng = rng.fork()
    data_rng = rng.fork()
    quant_seed = rng.fork()
    spec = QuantSpec(block=cfg.model.quant_block, rounding=cfg.model.quant_rounding)
    mdl = model_mod.init_model(
        model_rng,
        n_layers=cfg.model.layers,
        hidden=cfg.model.hidden,
        classes=cfg.model.classes,
        rank=cfg.model.rank,
        alpha=cfg.model.alpha,
        base_scale=cfg.model.base_scale,
        depth_taper=cfg.model.depth_taper,
        quant_spec=spec,
    )
    n = cfg.training.batch_size
    xb = np.array(
        [[data_rng.normal() for _ in range(cfg.model.hidden)] for _ in range(n)]
    )
    yb = np.array([data_rng.randint(cfg.model.classes) for _ in range(n)], dtype=np.int64)

    samples = []
    for d in range(1, cfg.model.layers + 1):
        for a in range(0, d):
            cfg_da = Configuration(d, a)
            model_mod.apply_configuration(mdl, cfg_da)
            times = []
            peak = None
            for _ in range(timing_repeats):
                quant_rng = RngStream(quant_seed.seed, 0)
                t0 = time.perf_counter()
                logits, store = model_mod.forward(mdl, xb, rng=quant_rng)
                model_mod.backward(mdl, store, logits, yb)
                times.append(time.perf_counter() - t0)
                peak = store.measured_bytes
            samples.append(
                {
                    "d": d,
                    "a": a,
                    "store_bytes": peak,
                    "wall_s": float(np.median(times)),
                }
            )

    design = np.array([[1.0, s["d"], -float(s["a"])] for s in samples])
    bytes_vec = np.array([float(s["store_bytes"]) for s in samples])
    mem_coef, _, _, _ = np.linalg.lstsq(design, bytes_vec, rcond=None)
    mem_pred = design @ mem_coef
    mem_resid = float(np.max(np.abs(mem_pred - bytes_vec)))

    lat_design = np.array([[1.0, s["d"], float(s["a"])] for s in samples])
    wall = np.array([s["wall_s"] for s in samples])
    lat_coef, _, _, _ = np.linalg.lstsq(lat_design, wall, rcond=None)
    lat_resid = float(np.max(np.abs(lat_design @ lat_coef - wall)))

    analytic = derive_cost_model(cfg)
    return {
        "memory": {
            "m_f_mb": float(mem_coef[0]) / MB,
            "m_o_mb": float(mem_coef[1]) / MB,
            "m_q_mb": float(mem_coef[2]) / MB,
            "max_residual_bytes": mem_resid,
            "analytic_m_f_mb": analytic.m_f,
            "analytic_m_o_mb": analytic.m_o,
            "analytic_m_q_mb": analytic.m_q,
        },
        "latency": {
            "c_base_s": float(lat_coef[0]),
            "c_d_s": float(lat_coef[1]),
            "c_a_s": float(lat_coef[2]),
            "max_residual_s": lat_resid,
        },
        "samples": samples,
        "batch_size": n,
        "hidden": cfg.model.hidden,
        "layers": cfg.model.layers,
    }
