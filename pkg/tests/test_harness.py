import csv
import filecmp
import json
from dataclasses import replace

import numpy as np
import pytest

from sftcop.harness import (ConfigError, RunConfig, lambda_ablation, read_metrics, run_sequence,
                            SchemaError, summarize, threshold_sweep)


def tiny(small_layout, tmp_path, **kw):
    base = dict(layout=small_layout, n_tasks=3, steps_per_task=600, horizon=40, seeds=(0, 1),
                output_dir=str(tmp_path / "out"), block_size=2)
    base.update(kw)
    return RunConfig(**base)


def test_defaults_accept_reference_hyperparameters():
    cfg = RunConfig()
    assert cfg.threshold == -0.000005
    assert (cfg.alpha_sf, cfg.alpha_w, cfg.gamma, cfg.epsilon) == (0.5, 0.5, 0.95, 0.12)
    assert cfg.steps_per_task == 20_000


def test_config_rejects_unknown_and_invalid(tmp_path):
    with pytest.raises(ConfigError, match="unknown config keys: colour"):
        RunConfig.from_dict({"colour": "red"})
    for bad in ({"n_tasks": 0}, {"seeds": []}, {"method": "dqn"}, {"epsilon": 2.0},
                {"fixed_lambda": -1.0}, {"seeds": [1, 1]}, {"layout": str(tmp_path / "none")}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)


def test_config_json_round_trip(tmp_path):
    cfg = RunConfig(method="pdql", seeds=(3, 4), thresholds=(-1.0, 0.0))
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(p) == cfg


def test_hash_ignores_runtime_fields(tmp_path):
    a = RunConfig()
    assert a.config_hash() == replace(a, workers=4, seeds=(9,), output_dir="x").config_hash()
    assert a.config_hash() != replace(a, threshold=-0.1).config_hash()
    # a fixed multiplier makes the threshold and dual settings irrelevant
    f = replace(a, fixed_lambda=1.0)
    assert f.config_hash() == replace(f, threshold=-0.1, dual_update_period=7).config_hash()


def test_run_writes_artifacts_and_reuses_them(small_layout, tmp_path):
    cfg = tiny(small_layout, tmp_path)
    res = run_sequence(cfg)
    d = res.directory / "seed_0"
    for name in ("metrics.csv", "events.csv", "summary.json", "manifest.json"):
        assert (d / name).is_file()
    man = json.loads((d / "manifest.json").read_text())
    assert man["config_hash"] == cfg.config_hash() and man["seed"] == 0
    assert set(man["versions"]) >= {"numpy", "scipy", "python", "sftcop"}
    before = (d / "metrics.csv").stat().st_mtime_ns
    run_sequence(cfg)
    assert (d / "metrics.csv").stat().st_mtime_ns == before
    run_sequence(cfg, reuse=False)
    assert (d / "metrics.csv").stat().st_mtime_ns != before


@pytest.mark.parametrize("method", ["sft_cop", "sfql", "pdql"])
def test_determinism_serial_vs_parallel(small_layout, tmp_path, method):
    a = run_sequence(tiny(small_layout, tmp_path / "a", method=method))
    b = run_sequence(tiny(small_layout, tmp_path / "b", method=method, workers=2))
    for s in (0, 1):
        for name in ("metrics.csv", "events.csv", "summary.json"):
            assert filecmp.cmp(a.directory / f"seed_{s}" / name, b.directory / f"seed_{s}" / name,
                               shallow=False)


def test_seeds_run_independently(small_layout, tmp_path):
    both = run_sequence(tiny(small_layout, tmp_path / "a", seeds=(0, 1)))
    one = run_sequence(tiny(small_layout, tmp_path / "b", seeds=(1,)))
    assert filecmp.cmp(both.metrics_path(1), one.metrics_path(1), shallow=False)


def test_summary_matches_recomputation_from_csv(small_layout, tmp_path):
    res = run_sequence(tiny(small_layout, tmp_path))
    for s in res.seeds:
        cols = read_metrics(res.metrics_path(s))
        summ = res.summaries[s]
        for t in summ["tasks"]:
            sel = cols["task"] == t["task"]
            assert t["episodes"] == int(sel.sum())
            assert t["failures"] == int(cols["failures"][sel].sum())
            for key in ("total_reward", "safe_reward", "unsafe_reward"):
                assert abs(t[key] - cols[key][sel].sum()) <= 1e-12
        # block means over tasks (block_size 2 on 3 tasks)
        per = [t["failures"] for t in summ["tasks"]]
        assert [b["failures"] for b in summ["blocks"]] == [np.mean(per[:2]), np.mean(per[2:])]


def test_failures_equal_trap_events(small_layout, tmp_path):
    res = run_sequence(tiny(small_layout, tmp_path))
    for s in res.seeds:
        cols = read_metrics(res.metrics_path(s))
        with (res.directory / f"seed_{s}" / "events.csv").open() as fh:
            ev = list(csv.DictReader(fh))
        traps = [(int(e["task"]), int(e["episode"])) for e in ev if e["event"] == "trap_entered"]
        assert len(traps) == int(cols["failures"].sum())
        for task, episode, f in zip(cols["task"], cols["episode"], cols["failures"]):
            assert traps.count((task, episode)) == f


def test_single_task_run(small_layout, tmp_path):
    res = run_sequence(tiny(small_layout, tmp_path, n_tasks=1, seeds=(0,)))
    assert [t["task"] for t in res.summaries[0]["tasks"]] == [0]


def test_lambda_ablation_outputs(small_layout, tmp_path):
    cfg = tiny(small_layout, tmp_path, estimation_periods=(1, 5), seeds=(0,))
    res = lambda_ablation(cfg)
    assert list(res) == ["lambda_0", "lambda_1", "estimated_p1", "estimated_p5"]
    cols = read_metrics(res["lambda_0"].metrics_path(0))
    assert np.all(cols["lambda"] == 0.0)
    assert np.all(read_metrics(res["lambda_1"].metrics_path(0))["lambda"] == 1.0)
    rows = list(csv.DictReader((tmp_path / "out" / "lambda_ablation.csv").open()))
    assert [r["variant"] for r in rows] == list(res)
    t = res["lambda_1"].summaries[0]["totals"]
    assert float(rows[1]["mean_episode_failures"]) == t["failures"] / t["episodes"]
    with pytest.raises(ConfigError):
        lambda_ablation(replace(cfg, estimation_periods=(1,)))


def test_threshold_sweep_outputs(small_layout, tmp_path):
    cfg = tiny(small_layout, tmp_path, thresholds=(-3.0, -5e-6), seeds=(0,))
    res = threshold_sweep(cfg)
    assert list(res) == [-3.0, -5e-6]
    rows = list(csv.DictReader((tmp_path / "out" / "threshold_sweep.csv").open()))
    assert [float(r["tau"]) for r in rows] == [-3.0, -5e-6]
    # a threshold no policy can violate behaves as the unconstrained learner
    free = run_sequence(tiny(small_layout, tmp_path, fixed_lambda=0.0, seeds=(0,)))
    assert filecmp.cmp(res[-3.0].metrics_path(0), free.metrics_path(0), shallow=False)
    with pytest.raises(ConfigError):
        threshold_sweep(replace(cfg, thresholds=(1.0, 1.0)))


def test_read_metrics_names_bad_column(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("task,episode,step,failures,total_reward,safe_reward,unsafe_reward,v_c_hat,lam\n")
    with pytest.raises(SchemaError, match="'lam'"):
        read_metrics(p)
    p.write_text("task,episode,step,failures,total_reward,safe_reward,unsafe_reward,v_c_hat\n")
    with pytest.raises(SchemaError, match="missing column 'lambda'"):
        read_metrics(p)
    p.write_text("task,episode,step,failures,total_reward,safe_reward,unsafe_reward,v_c_hat,lambda\n"
                 "0,0,1,x,0,0,0,0,0\n")
    with pytest.raises(SchemaError, match="'failures'"):
        read_metrics(p)


def test_summarize_empty_blocks():
    assert summarize([], 8) == {"tasks": [], "blocks": [], "totals": {
        "failures": 0, "total_reward": 0, "safe_reward": 0, "unsafe_reward": 0, "episodes": 0}}
