"""Config loading, fleet construction, experiment runs, and the CLI."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fedquad.config import (
    ConfigError,
    config_to_dict,
    default_config,
    load_config,
)
from fedquad.experiment import (
    MB,
    build_fleet,
    calibrate_cost_model,
    compare_policies,
    derive_cost_model,
    run_experiment,
    write_comparison,
    write_run,
)
from fedquad.quant import full_bytes
from fedquad.resource import Configuration, estimate_memory


def fast_config():
    cfg = default_config()
    cfg.workload.train_samples = 360
    cfg.workload.test_samples = 180
    cfg.fleet.strong.count = 1
    cfg.fleet.moderate.count = 1
    cfg.fleet.weak.count = 2
    cfg.rounds = 3
    return cfg


# ---------------------------------------------------------------------------
# cost model derivation


def test_derive_cost_model_analytic_memory():
    cm = derive_cost_model(default_config())
    # batch 32, hidden 32, block 32: act 8192 B, stats 512 B, codes+scales
    # 1152 B per tensor
    assert cm.m_f * MB == 8192
    assert cm.m_o * MB == 4 * 8192 + 512
    assert cm.m_q * MB == 4 * (8192 - 1152)


def test_derive_cost_model_latency_fill():
    cfg = default_config()
    cm = derive_cost_model(cfg)
    assert cm.c_base == 2.5
    assert cm.c_d == 5.0
    # c_a defaults to 36% of the full-depth step cost spread over L-1 layers
    assert abs(cm.c_a - 0.36 * (2.5 + 5.0 * 6) / 5) <= 1e-12


def test_derive_cost_model_config_overrides_win():
    cfg = default_config()
    cfg.cost.m_f_mb = 1.5
    cfg.cost.m_o_mb = 9.0
    cfg.cost.m_q_mb = 4.0
    cfg.cost.c_a = 0.7
    cm = derive_cost_model(cfg)
    assert (cm.m_f, cm.m_o, cm.m_q, cm.c_a) == (1.5, 9.0, 4.0, 0.7)


# ---------------------------------------------------------------------------
# config loading


def test_default_config_shape():
    cfg = default_config()
    assert cfg.model.layers == 6
    assert cfg.model.hidden == 32
    assert cfg.fleet.strong.count + cfg.fleet.moderate.count + cfg.fleet.weak.count == 12
    assert cfg.policy == "acs"
    d = config_to_dict(cfg)
    assert d["model"]["layers"] == 6
    assert d["reward"]["theta"] is None


def test_load_config_toml(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('seed = 7\nrounds = 4\n[model]\nlayers = 8\n[reward]\nc = 2.0\n')
    cfg = load_config(p)
    assert cfg.seed == 7
    assert cfg.rounds == 4
    assert cfg.model.layers == 8
    assert cfg.reward.c == 2.0
    # untouched fields keep defaults
    assert cfg.model.hidden == 32


def test_load_config_json(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"policy": "max_depth", "cost": {"c_a": 1.25}}))
    cfg = load_config(p)
    assert cfg.policy == "max_depth"
    assert cfg.cost.c_a == 1.25


def test_load_config_unknown_field_names_path(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text("[model]\nwidth = 64\n")
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert "model.width" in str(err.value)


def test_load_config_type_mismatch(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"model": {"layers": "six"}}))
    with pytest.raises(ConfigError):
        load_config(p)


def test_load_config_null_only_for_optional_floats(tmp_path):
    p = tmp_path / "ok.json"
    p.write_text(json.dumps({"reward": {"theta": None}}))
    assert load_config(p).reward.theta is None
    p2 = tmp_path / "bad.json"
    p2.write_text(json.dumps({"model": {"layers": None}}))
    with pytest.raises(ConfigError):
        load_config(p2)


def test_load_config_rejects_bad_values(tmp_path):
    cases = [
        {"rounds": 0},
        {"fixed_depth": 9},
        {"model": {"rank": 30}},
        {"workload": {"noise": 1.5}},
        {"fleet": {"strong": {"depth_range": [4, 2]}}},
        {"fleet": {"weak": {"modes": []}}},
        {"model": {"layers": 4}},  # strong depth range would exceed the stack
    ]
    for i, doc in enumerate(cases):
        p = tmp_path / f"c{i}.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            load_config(p)


def test_load_config_bad_extension_and_parse_errors(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("rounds: 3")
    with pytest.raises(ConfigError):
        load_config(p)
    q = tmp_path / "run.toml"
    q.write_text("rounds = = 3")
    with pytest.raises(ConfigError):
        load_config(q)
    r = tmp_path / "run.json"
    r.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(r)


# ---------------------------------------------------------------------------
# fleet construction


def test_build_fleet_composition():
    fleet = build_fleet(default_config(), seed=11)
    assert len(fleet.devices) == 12
    classes = [d.profile.device_class for d in fleet.devices]
    assert classes == ["strong"] * 3 + ["moderate"] * 3 + ["weak"] * 6
    assert [d.profile.device_id for d in fleet.devices] == list(range(12))
    # every device got its own data shard
    assert sum(len(d.data) for d in fleet.devices) == 6000
    assert len(fleet.testset) == 1200


def test_build_fleet_memory_levels_follow_cost_model():
    cfg = default_config()
    fleet = build_fleet(cfg, seed=12)
    cm = fleet.cost_model
    strong = fleet.devices[0]
    lo, hi = cfg.fleet.strong.depth_range
    want = [estimate_memory(cm, Configuration(d, 0)) for d in range(lo, hi + 1)]
    assert strong.profile.memory_levels == want
    assert strong.profile.memory_mb in want


def test_build_fleet_deterministic():
    a = build_fleet(fast_config(), seed=13)
    b = build_fleet(fast_config(), seed=13)
    assert a.trainset.x.tobytes() == b.trainset.x.tobytes()
    for da, db in zip(a.devices, b.devices):
        assert da.profile.memory_mb == db.profile.memory_mb
        assert da.profile.throughput == db.profile.throughput
        assert np.array_equal(da.data.y, db.data.y)
    la = a.server.eval_model.layers[0].w_in
    lb = b.server.eval_model.layers[0].w_in
    assert la.tobytes() == lb.tobytes()


def test_build_fleet_seed_changes_everything():
    a = build_fleet(fast_config(), seed=13)
    b = build_fleet(fast_config(), seed=14)
    assert a.trainset.x.tobytes() != b.trainset.x.tobytes()


# ---------------------------------------------------------------------------
# run_experiment


def test_run_experiment_records_and_summary():
    cfg = fast_config()
    res = run_experiment(cfg, rounds=2, early_stop=False)
    assert len(res.records) == 2
    s = res.summary
    assert s["policy"] == "acs"
    assert s["seed"] == 42
    assert s["rounds_run"] == 2
    assert s["round_budget"] == 2
    assert s["stopped_early"] is False
    assert 0.0 <= s["final_accuracy"] <= 1.0
    assert s["best_accuracy"] >= s["final_accuracy"] - 1e-12
    assert s["total_oom_violations"] == 0
    assert s["total_clock_s"] == pytest.approx(res.records[-1].clock_s)
    waits = [r.waiting_s for r in res.records]
    assert s["mean_waiting_s"] == pytest.approx(float(np.mean(waits)))


def test_run_experiment_argument_overrides():
    cfg = fast_config()
    res = run_experiment(cfg, policy="max_depth", seed=9, rounds=1, early_stop=False)
    assert res.summary["policy"] == "max_depth"
    assert res.summary["seed"] == 9
    assert res.summary["rounds_run"] == 1
    # the config object passed in is not mutated
    assert cfg.policy == "acs"
    assert cfg.seed == 42


def test_run_experiment_zero_target_hits_first_round():
    cfg = fast_config()
    cfg.target_accuracy = 0.0
    res = run_experiment(cfg, rounds=2, early_stop=False)
    assert res.summary["time_to_target_s"] == pytest.approx(res.records[0].clock_s)


def test_run_experiment_early_stop():
    cfg = fast_config()
    cfg.target_accuracy = 0.0
    cfg.early_stop_patience = 2
    res = run_experiment(cfg, rounds=30, early_stop=True)
    assert res.summary["stopped_early"] is True
    assert res.summary["rounds_run"] == 2
    assert res.summary["round_budget"] == 30


def test_run_experiment_unreached_target_is_none():
    cfg = fast_config()
    cfg.target_accuracy = 1.01  # unreachable on purpose
    res = run_experiment(cfg, rounds=1, early_stop=False)
    assert res.summary["time_to_target_s"] is None


def test_write_run_files_and_replay_identical(tmp_path):
    cfg = fast_config()
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run_experiment(cfg, out_dir=out_a, rounds=2, early_stop=False)
    run_experiment(cfg, out_dir=out_b, rounds=2, early_stop=False)
    ma = (out_a / "metrics.jsonl").read_bytes()
    mb = (out_b / "metrics.jsonl").read_bytes()
    assert ma == mb
    rows = [json.loads(line) for line in ma.decode().splitlines()]
    assert len(rows) == 2
    for key in ("round", "clock_s", "waiting_s", "accuracy", "devices", "oom_device_ids"):
        assert key in rows[0]
    summary = json.loads((out_a / "summary.json").read_text())
    assert set(summary) == {"summary", "config"}
    assert summary["config"]["seed"] == cfg.seed


def test_write_run_helper(tmp_path):
    res = run_experiment(fast_config(), rounds=1, early_stop=False)
    write_run(res, tmp_path / "out")
    assert (tmp_path / "out" / "metrics.jsonl").exists()
    assert (tmp_path / "out" / "summary.json").exists()


# ---------------------------------------------------------------------------
# comparisons and calibration


def test_compare_policies_paired_and_consistent(tmp_path):
    cfg = fast_config()
    out = compare_policies(cfg, ["acs", "max_depth"], seeds=[1, 2], rounds=2)
    assert set(out["runs"]) == {("acs", 1), ("acs", 2), ("max_depth", 1), ("max_depth", 2)}
    assert len(out["rows"]) == 4
    row = out["rows"][0]
    for key in ("policy", "seed", "mean_waiting_s", "final_accuracy", "time_to_relative_target_s"):
        assert key in row
    # the relative target is the per-seed minimum of final accuracies
    for seed in (1, 2):
        finals = [out["runs"][(p, seed)].summary["final_accuracy"] for p in ("acs", "max_depth")]
        targets = {r["relative_target"] for r in out["rows"] if r["seed"] == seed}
        assert targets == {min(finals)}
    # same-policy reruns under the same seed are byte-stable rows
    again = compare_policies(cfg, ["acs", "max_depth"], seeds=[1, 2], rounds=2)
    assert again["rows"] == out["rows"]
    write_comparison(out, tmp_path / "cmp")
    assert (tmp_path / "cmp" / "comparison.csv").exists()
    assert (tmp_path / "cmp" / "timeseries.csv").exists()


def test_calibrate_cost_model_matches_analytic():
    report = calibrate_cost_model(fast_config(), timing_repeats=1)
    mem = report["memory"]
    assert mem["max_residual_bytes"] < 1.0
    assert mem["m_f_mb"] * MB == pytest.approx(mem["analytic_m_f_mb"] * MB, abs=0.5)
    assert mem["m_o_mb"] * MB == pytest.approx(mem["analytic_m_o_mb"] * MB, abs=0.5)
    assert mem["m_q_mb"] * MB == pytest.approx(mem["analytic_m_q_mb"] * MB, abs=0.5)
    lat = report["latency"]
    assert lat["c_base_s"] > 0
    assert lat["c_d_s"] > 0
    assert report["batch_size"] == 32
    assert report["hidden"] == 32


def test_full_bytes_constant():
    # the analytic coefficients assume 8-byte activations
    assert full_bytes((32, 32)) == 32 * 32 * 8


# ---------------------------------------------------------------------------
# command line


def run_cli(args, env_extra=None, cwd=None):
    env = dict(os.environ)
    env.pop("FEDQUAD_SEED", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "fedquad.cli", *args],
        capture_output=True,
        text=True,
        env=env,
        cwd=cwd,
    )


def write_fast_toml(path):
    path.write_text(
        "rounds = 2\n"
        "[workload]\n"
        "train_samples = 360\n"
        "test_samples = 180\n"
        "[fleet.strong]\ncount = 1\n"
        "[fleet.moderate]\ncount = 1\n"
        "[fleet.weak]\ncount = 2\n"
    )


def test_cli_run_writes_outputs(tmp_path):
    cfg_path = tmp_path / "fast.toml"
    write_fast_toml(cfg_path)
    out = tmp_path / "run1"
    proc = run_cli(["run", "--config", str(cfg_path), "--seed", "5", "--out", str(out)])
    assert proc.returncode == 0, proc.stderr
    assert (out / "metrics.jsonl").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["summary"]["seed"] == 5
    assert summary["summary"]["rounds_run"] <= 2


def test_cli_seed_env_fallback(tmp_path):
    cfg_path = tmp_path / "fast.toml"
    write_fast_toml(cfg_path)
    out = tmp_path / "run2"
    proc = run_cli(
        ["run", "--config", str(cfg_path), "--out", str(out)],
        env_extra={"FEDQUAD_SEED": "31"},
    )
    assert proc.returncode == 0, proc.stderr
    summary = json.loads((out / "summary.json").read_text())
    assert summary["summary"]["seed"] == 31
    # explicit flag beats the environment
    out3 = tmp_path / "run3"
    proc = run_cli(
        ["run", "--config", str(cfg_path), "--seed", "8", "--out", str(out3)],
        env_extra={"FEDQUAD_SEED": "31"},
    )
    assert proc.returncode == 0, proc.stderr
    summary = json.loads((out3 / "summary.json").read_text())
    assert summary["summary"]["seed"] == 8


def test_cli_bad_seed_env_rejected(tmp_path):
    cfg_path = tmp_path / "fast.toml"
    write_fast_toml(cfg_path)
    proc = run_cli(
        ["run", "--config", str(cfg_path), "--out", str(tmp_path / "x")],
        env_extra={"FEDQUAD_SEED": "not-a-number"},
    )
    assert proc.returncode != 0
    assert "FEDQUAD_SEED" in proc.stderr


def test_cli_rejects_unknown_policy(tmp_path):
    proc = run_cli(["run", "--policy", "magic"])
    assert proc.returncode != 0


def test_cli_compare(tmp_path):
    cfg_path = tmp_path / "fast.toml"
    write_fast_toml(cfg_path)
    out = tmp_path / "cmp"
    proc = run_cli(
        [
            "compare",
            "--config", str(cfg_path),
            "--policies", "acs,max_depth",
            "--seeds", "2",
            "--out", str(out),
        ]
    )
    assert proc.returncode == 0, proc.stderr
    lines = (out / "comparison.csv").read_text().splitlines()
    assert len(lines) == 1 + 4  # header + 2 policies x 2 seeds
