"""Charts from metrics CSVs.

Curves are per-task accumulated counters, averaged over blocks of tasks,
drawn as mean +- std across seeds. Std uses ``ddof=1`` (the sample standard
deviation a spreadsheet reports) and is 0 for a single seed. Every chart also
writes the plotted numbers to a CSV next to the image.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import read_metrics  # noqa: E402

CURVE_METRICS = ("failures", "total_reward", "safe_reward", "unsafe_reward")
CURVE_HEADER = ("label", "block", "first_task", "mean", "std", "n_seeds")
BAR_HEADER = ("label", "mean", "std", "n_seeds")


def metrics_files(source) -> list[Path]:
    """A metrics CSV, or a run directory holding ``seed_*/metrics.csv``."""
    p = Path(source)
    if p.is_file():
        return [p]
    if p.is_dir():
        files = sorted(p.glob("seed_*/metrics.csv"))
        if files:
            return files
    raise FileNotFoundError(f"no metrics CSV found at {p}")


def per_task_totals(path, metric: str) -> np.ndarray:
    if metric not in CURVE_METRICS:
        raise ValueError(f"metric must be one of {CURVE_METRICS}, got {metric!r}")
    cols = read_metrics(path)
    tasks = cols["task"]
    if tasks.size == 0:
        raise ValueError(f"{path}: no episodes")
    n = int(tasks.max()) + 1
    return np.bincount(tasks, weights=cols[metric].astype(float), minlength=n)


def block_means(per_task: np.ndarray, block_size: int) -> np.ndarray:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    return np.array([per_task[b:b + block_size].mean()
                     for b in range(0, len(per_task), block_size)])


def mean_std(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and sample std over axis 0 (seeds)."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] == 0:
        raise ValueError("empty seed set")
    std = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros(samples.shape[1:])
    return samples.mean(axis=0), std


def aggregate_curves(groups: Mapping[str, Sequence], metric: str,
                     block_size: int = 8) -> list[dict]:
    rows = []
    for label, files in groups.items():
        files = list(files)
        if not files:
            raise ValueError(f"empty seed set for {label!r}")
        curves = [block_means(per_task_totals(f, metric), block_size) for f in files]
        if len({c.size for c in curves}) != 1:
            raise ValueError(f"{label!r}: seeds cover different numbers of tasks")
        mean, std = mean_std(np.vstack(curves))
        for b, (m, s) in enumerate(zip(mean, std)):
            rows.append({"label": label, "block": b, "first_task": b * block_size,
                         "mean": float(m), "std": float(s), "n_seeds": len(files)})
    return rows


def _write(path: Path, header, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in header])


def plot_curves(groups: Mapping[str, Sequence], metric: str, out, block_size: int = 8,
                title: str | None = None) -> tuple[Path, Path]:
    """One line per label with a +-std band; returns (image, aggregate csv)."""
    if not groups:
        raise ValueError("nothing to plot")
    rows = aggregate_curves(groups, metric, block_size)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in groups:
        r = [x for x in rows if x["label"] == label]
        x = np.array([x["first_task"] for x in r]) + 1
        m = np.array([x["mean"] for x in r])
        s = np.array([x["std"] for x in r])
        ax.plot(x, m, marker="o", label=label)
        ax.fill_between(x, m - s, m + s, alpha=0.25)
    ax.set_xlabel(f"task (first of each block of {block_size})")
    ax.set_ylabel(f"{metric} per task")
    ax.set_title(title or metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    table = out.with_suffix(".csv")
    _write(table, CURVE_HEADER, rows)
    return out, table


def plot_bars(values: Mapping[str, Sequence[float]], out, ylabel: str = "",
              title: str | None = None) -> tuple[Path, Path]:
    """Bar per label (mean over seeds) with std error bars."""
    if not values:
        raise ValueError("nothing to plot")
    rows = []
    for label, v in values.items():
        v = np.asarray(v, dtype=float)
        if v.size == 0:
            raise ValueError(f"empty seed set for {label!r}")
        m, s = mean_std(v.reshape(-1, 1))
        rows.append({"label": label, "mean": float(m[0]), "std": float(s[0]), "n_seeds": v.size})
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([r["label"] for r in rows], [r["mean"] for r in rows],
           yerr=[r["std"] for r in rows], capsize=4)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    table = out.with_suffix(".csv")
    _write(table, BAR_HEADER, rows)
    return out, table


def bars_from_table(path, label_col: str, value_col: str) -> dict[str, list[float]]:
    """Group a combined CSV (ablation or sweep) by ``label_col``."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for col in (label_col, value_col):
            if col not in (reader.fieldnames or []):
                raise ValueError(f"{path}: missing column {col!r}")
        out: dict[str, list[float]] = {}
        for row in reader:
            out.setdefault(row[label_col], []).append(float(row[value_col]))
    if not out:
        raise ValueError(f"{path}: empty seed set")
    return out
