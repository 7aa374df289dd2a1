import csv
import statistics

import pytest

from sftcop.core import MetricsRecord
from sftcop.harness import SchemaError
from sftcop.plotting import (aggregate_curves, bars_from_table, metrics_files, plot_bars,
                             plot_curves)

# per-seed failures per episode for 4 tasks x 2 episodes
FIXTURE = {
    0: [[1, 2], [0, 3], [4, 4], [1, 0]],
    1: [[0, 0], [5, 1], [2, 2], [3, 3]],
    2: [[2, 2], [2, 2], [0, 1], [7, 0]],
}


def write_seed(path, table):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.CSV_HEADER)
        step = 0
        for task, eps in enumerate(table):
            for e, f in enumerate(eps):
                step += 10
                w.writerow(MetricsRecord(task, e, step, f, 0.5 * f, 0.0, 0.0, 0.0, 0.0).as_row())


@pytest.fixture
def run_dir(tmp_path):
    for s, table in FIXTURE.items():
        write_seed(tmp_path / "run" / f"seed_{s}" / "metrics.csv", table)
    return tmp_path / "run"


def test_aggregates_match_independent_recomputation(run_dir, tmp_path):
    files = metrics_files(run_dir)
    assert len(files) == 3
    img, table = plot_curves({"a": files}, "failures", tmp_path / "f.png", block_size=2)
    assert img.stat().st_size > 0
    rows = list(csv.DictReader(table.open()))
    # recompute with the statistics module: per-task sums, block means, sample std over seeds
    for b in range(2):
        per_seed = [statistics.mean(sum(FIXTURE[s][t]) for t in (2 * b, 2 * b + 1)) for s in FIXTURE]
        assert float(rows[b]["mean"]) == pytest.approx(statistics.mean(per_seed), abs=1e-12)
        assert float(rows[b]["std"]) == pytest.approx(statistics.stdev(per_seed), abs=1e-12)
        assert rows[b]["n_seeds"] == "3"


def test_two_methods_one_chart(run_dir, tmp_path):
    files = metrics_files(run_dir)
    _, table = plot_curves({"x": files, "y": files[:2]}, "total_reward", tmp_path / "two.png", 4)
    rows = list(csv.DictReader(table.open()))
    assert [r["label"] for r in rows] == ["x", "y"]


def test_empty_seed_set_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty seed set"):
        aggregate_curves({"a": []}, "failures")
    with pytest.raises(ValueError, match="empty seed set"):
        plot_bars({"a": []}, tmp_path / "b.png")


def test_schema_error_names_column(tmp_path):
    p = tmp_path / "seed_0" / "metrics.csv"
    p.parent.mkdir()
    p.write_text("task,episode,step,failure,total_reward,safe_reward,unsafe_reward,v_c_hat,lambda\n")
    with pytest.raises(SchemaError, match="'failure'"):
        plot_curves({"a": [p]}, "failures", tmp_path / "x.png")


def test_bars_from_combined_table(tmp_path):
    p = tmp_path / "ab.csv"
    p.write_text("variant,seed,failures\nlambda_0,0,10\nlambda_0,1,14\nest,0,2\nest,1,4\n")
    values = bars_from_table(p, "variant", "failures")
    _, table = plot_bars(values, tmp_path / "bars.png")
    rows = list(csv.DictReader(table.open()))
    assert rows[0]["label"] == "lambda_0" and float(rows[0]["mean"]) == 12.0
    assert float(rows[1]["std"]) == pytest.approx(statistics.stdev([2, 4]))
    with pytest.raises(ValueError, match="'missing'"):
        bars_from_table(p, "variant", "missing")


def test_unknown_metric_and_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        metrics_files(tmp_path / "nothing")
    write_seed(tmp_path / "m.csv", FIXTURE[0])
    with pytest.raises(ValueError):
        plot_curves({"a": [tmp_path / "m.csv"]}, "lambda", tmp_path / "x.png")
