"""Config-driven Four-Room experiments.

Every run is stored under ``<output_dir>/runs/<config hash>/seed_<k>/`` with

    metrics.csv     one row per episode (header in ``MetricsRecord.CSV_HEADER``)
    events.csv      every trap, object and goal event
    summary.json    per-task aggregates and block means
    manifest.json   config, hash, seed, library versions and wall time

The hash covers only the fields that change results, so a run requested twice
(from ``train``, an ablation or a threshold sweep) is computed once and reused.

Randomness: tasks come from ``default_rng([seed, 0])``, episode ``e`` of task
``k`` uses ``default_rng([seed, 1, k, e])`` and library noise uses
``default_rng([seed, 2])``. Nothing depends on process or execution order, so
serial and parallel runs write identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import PDQLConfig, pdql_train_task, sfql_train_task
from .core import MetricsRecord
from .dual import DualConfig
from .gridworld import GridWorld, default_layout, load_layout, sample_task
from .sf_learning import EpisodeStreams, LearnerConfig, SuccessorLibrary, train_task

log = logging.getLogger(__name__)

METHODS = ("sft_cop", "sfql", "pdql")
EVENTS_HEADER = ("task", "episode", "step", "event", "detail")
ABLATION_HEADER = ("variant", "seed", "episodes", "mean_episode_reward", "mean_episode_failures",
                   "failures", "total_reward", "safe_reward", "unsafe_reward")
SWEEP_HEADER = ("tau", "seed", "failures", "total_reward", "safe_reward", "unsafe_reward",
                "mean_v_c_hat", "final_v_c_hat")

# fields that do not change any result and stay out of the hash
_RUNTIME_FIELDS = ("output_dir", "workers", "seeds", "estimation_periods", "thresholds")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    method: str = "sft_cop"
    layout: str | None = None  # path to a layout JSON; None is the packaged map
    n_tasks: int = 16
    steps_per_task: int = 20_000
    horizon: int = 200
    seeds: tuple = (0, 1, 2, 3, 4)
    alpha_sf: float = 0.5
    alpha_w: float = 0.5
    gamma: float = 0.95
    epsilon: float = 0.12
    threshold: float = -0.000005
    dual_iterations: int = 500
    dual_step_constant: float = 1000.0
    subgradient: str = "constraint"
    dual_update_period: int = 1
    dual_at: str = "state"
    init_from_previous: bool = True
    init_noise: float = 0.0
    fixed_lambda: float | None = None
    pdql_eta0: float = 0.5
    pdql_decay: float = 0.0
    # ablation and sweep axes
    estimation_periods: tuple = (1, 10, 50)
    thresholds: tuple = (-0.5, -0.05, -0.000005)
    block_size: int = 8
    output_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "estimation_periods", tuple(int(p) for p in self.estimation_periods))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise ConfigError("seeds must be distinct nonnegative integers")
        if self.block_size < 1 or self.workers < 1:
            raise ConfigError("block_size and workers must be >= 1")
        if self.fixed_lambda is not None and not self.fixed_lambda >= 0:
            raise ConfigError("fixed_lambda must be >= 0")
        if not np.isfinite(self.threshold):
            raise ConfigError("threshold must be finite")
        if any(p < 1 for p in self.estimation_periods):
            raise ConfigError("estimation periods must be >= 1")
        if self.layout is not None and not Path(self.layout).is_file():
            raise ConfigError(f"layout file not found: {self.layout}")
        try:
            self.learner_config()
            self.dual_config()
            self.pdql_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig(alpha_sf=self.alpha_sf, alpha_w=self.alpha_w, gamma=self.gamma,
                             epsilon=self.epsilon, episode_horizon=self.horizon,
                             steps_per_task=self.steps_per_task,
                             dual_update_period=self.dual_update_period, dual_at=self.dual_at,
                             init_from_previous=self.init_from_previous)

    def dual_config(self) -> DualConfig:
        return DualConfig(iterations=self.dual_iterations,
                          schedule_constant=self.dual_step_constant, subgradient=self.subgradient)

    def pdql_config(self) -> PDQLConfig:
        return PDQLConfig(alpha=self.alpha_sf, gamma=self.gamma, epsilon=self.epsilon,
                          episode_horizon=self.horizon, steps_per_task=self.steps_per_task,
                          eta0=self.pdql_eta0, decay=self.pdql_decay)

    # ---------------------------------------------------------------- io

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("seeds", "estimation_periods", "thresholds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def result_key(self) -> dict:
        d = self.to_dict()
        for k in _RUNTIME_FIELDS:
            d.pop(k)
        if self.layout is not None:
            # hash the map itself, not where it lives
            d["layout"] = hashlib.sha256(Path(self.layout).read_bytes()).hexdigest()
        if self.method != "sft_cop":
            for k in ("dual_iterations", "dual_step_constant", "subgradient", "dual_update_period",
                      "dual_at", "fixed_lambda"):
                d.pop(k)
        elif self.fixed_lambda is not None:
            for k in ("dual_iterations", "dual_step_constant", "subgradient", "dual_update_period",
                      "dual_at", "threshold"):
                d.pop(k)
        if self.method != "pdql":
            d.pop("pdql_eta0")
            d.pop("pdql_decay")
        if self.method == "sfql":
            d.pop("threshold")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.result_key(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / "runs" / self.config_hash()


# ------------------------------------------------------------- one seed

def _load_layout(cfg: RunConfig):
    return default_layout() if cfg.layout is None else load_layout(Path(cfg.layout))


def run_seed(cfg: RunConfig, seed: int) -> tuple[list[MetricsRecord], list[tuple]]:
    """Train ``cfg.n_tasks`` tasks in sequence for one seed; no files are written."""
    layout = _load_layout(cfg)
    task_rng = np.random.default_rng([seed, 0])
    library = SuccessorLibrary(GridWorld.n_actions, layout.feature_dim, cfg.init_noise,
                               np.random.default_rng([seed, 2]))
    lcfg, dcfg, pcfg = cfg.learner_config(), cfg.dual_config(), cfg.pdql_config()
    records: list[MetricsRecord] = []
    events: list[tuple] = []

    def on_event(task, episode, step, ev):
        events.append((task, episode, step, ev[0], ":".join(str(int(x)) for x in ev[1:])))

    for k in range(cfg.n_tasks):
        task = sample_task(task_rng, layout, threshold=cfg.threshold, gamma=cfg.gamma, task_id=k)
        env = GridWorld(layout, task)
        streams = EpisodeStreams(seed, k)
        if cfg.method == "sft_cop":
            _, recs = train_task(env, task, library, lcfg, dcfg, streams,
                                 fixed_lambda=cfg.fixed_lambda, task_index=k, on_event=on_event)
        elif cfg.method == "sfql":
            _, recs = sfql_train_task(env, task, library, lcfg, streams, task_index=k,
                                      on_event=on_event)
        else:
            _, recs = pdql_train_task(env, task, pcfg, streams, task_index=k, on_event=on_event)
        records.extend(recs)
        log.debug("seed %d task %d: %d episodes", seed, k, len(recs))
    return records, events


def summarize(records, block_size: int = 8) -> dict:
    """Per-task sums of the episode counters plus means over blocks of tasks."""
    tasks: dict[int, dict] = {}
    for r in records:
        t = tasks.setdefault(r.task, {"task": r.task, "episodes": 0, "failures": 0,
                                      "total_reward": 0.0, "safe_reward": 0.0,
                                      "unsafe_reward": 0.0, "final_lambda": 0.0})
        t["episodes"] += 1
        t["failures"] += r.failures
        t["total_reward"] += r.total_reward
        t["safe_reward"] += r.safe_reward
        t["unsafe_reward"] += r.unsafe_reward
        t["final_lambda"] = r.lam
    per_task = [tasks[k] for k in sorted(tasks)]
    for t in per_task:
        t["mean_episode_reward"] = t["total_reward"] / t["episodes"]
        t["mean_episode_failures"] = t["failures"] / t["episodes"]
    keys = ("failures", "total_reward", "safe_reward", "unsafe_reward")
    blocks = []
    for b in range(0, len(per_task), block_size):
        chunk = per_task[b:b + block_size]
        blocks.append({"first_task": chunk[0]["task"], "n_tasks": len(chunk),
                       **{k: float(np.mean([t[k] for t in chunk])) for k in keys}})
    totals = {k: sum(t[k] for t in per_task) for k in keys}
    totals["episodes"] = sum(t["episodes"] for t in per_task)
    return {"tasks": per_task, "blocks": blocks, "totals": totals}


def _versions() -> dict:
    return {"sftcop": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _write_csv(path: Path, header, rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def seed_dir(cfg: RunConfig, seed: int) -> Path:
    return cfg.run_dir() / f"seed_{seed}"


def _is_cached(cfg: RunConfig, seed: int) -> bool:
    d = seed_dir(cfg, seed)
    man = d / "manifest.json"
    if not all((d / n).is_file() for n in ("metrics.csv", "events.csv", "summary.json")):
        return False
    try:
        doc = json.loads(man.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return doc.get("config_hash") == cfg.config_hash() and doc.get("seed") == seed


def _seed_job(cfg_doc: dict, seed: int) -> str:
    # module level so it pickles into worker processes
    cfg = RunConfig.from_dict(cfg_doc)
    out = seed_dir(cfg, seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    start = time.perf_counter()
    records, events = run_seed(cfg, seed)
    elapsed = time.perf_counter() - start
    _write_csv(out / "metrics.csv", MetricsRecord.CSV_HEADER, (r.as_row() for r in records))
    _write_csv(out / "events.csv", EVENTS_HEADER, events)
    (out / "summary.json").write_text(json.dumps(summarize(records, cfg.block_size), indent=1) + "\n")
    # manifest last: its presence marks a complete run
    manifest = {"config_hash": cfg.config_hash(), "seed": seed, "config": cfg.result_key(),
                "versions": _versions(), "elapsed_seconds": round(elapsed, 3)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return str(out)


def _execute(jobs: list[tuple[RunConfig, int]], workers: int, reuse: bool = True) -> None:
    seen, todo = set(), []
    for c, s in jobs:
        key = (str(c.run_dir()), s)
        if key in seen:
            continue
        seen.add(key)
        if reuse and _is_cached(c, s):
            log.info("reusing %s", seed_dir(c, s))
        else:
            todo.append((c, s))
    if workers <= 1 or len(todo) <= 1:
        for c, s in todo:
            log.info("running %s seed %d -> %s", c.method, s, seed_dir(c, s))
            _seed_job(c.to_dict(), s)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for f in [pool.submit(_seed_job, c.to_dict(), s) for c, s in todo]:
            f.result()


@dataclass
class RunResult:
    config: RunConfig
    directory: Path
    seeds: tuple
    summaries: dict = field(default_factory=dict)

    def metrics_path(self, seed: int) -> Path:
        return self.directory / f"seed_{seed}" / "metrics.csv"

    def totals(self, key: str) -> np.ndarray:
        return np.array([self.summaries[s]["totals"][key] for s in self.seeds], dtype=float)


def _result(cfg: RunConfig) -> RunResult:
    summaries = {s: json.loads((seed_dir(cfg, s) / "summary.json").read_text()) for s in cfg.seeds}
    return RunResult(cfg, cfg.run_dir(), cfg.seeds, summaries)


def run_sequence(cfg: RunConfig, reuse: bool = True) -> RunResult:
    """Run (or reuse) every seed of ``cfg`` and return the per-seed summaries."""
    _execute([(cfg, s) for s in cfg.seeds], cfg.workers, reuse)
    return _result(cfg)


# ------------------------------------------------------------ ablations

def ablation_variants(cfg: RunConfig) -> dict[str, RunConfig]:
    if len(cfg.estimation_periods) < 2:
        raise ConfigError("the ablation needs at least two estimation periods")
    base = replace(cfg, method="sft_cop")
    out = {"lambda_0": replace(base, fixed_lambda=0.0), "lambda_1": replace(base, fixed_lambda=1.0)}
    for p in cfg.estimation_periods:
        out[f"estimated_p{p}"] = replace(base, fixed_lambda=None, dual_update_period=p)
    return out


def lambda_ablation(cfg: RunConfig, reuse: bool = True) -> dict[str, RunResult]:
    """Fixed 0, fixed 1 and estimated multipliers at each period on the same tasks and seeds.

    Writes ``<output_dir>/lambda_ablation.csv`` with one row per (variant, seed).
    """
    variants = ablation_variants(cfg)
    _execute([(c, s) for c in variants.values() for s in c.seeds], cfg.workers, reuse)
    results = {name: _result(c) for name, c in variants.items()}
    rows = []
    for name, res in results.items():
        for s in res.seeds:
            t = res.summaries[s]["totals"]
            rows.append([name, s, t["episodes"], repr(t["total_reward"] / t["episodes"]),
                         repr(t["failures"] / t["episodes"]), t["failures"],
                         repr(t["total_reward"]), repr(t["safe_reward"]), repr(t["unsafe_reward"])])
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    _write_csv(Path(cfg.output_dir) / "lambda_ablation.csv", ABLATION_HEADER, rows)
    return results


def threshold_sweep(cfg: RunConfig, reuse: bool = True) -> dict[float, RunResult]:
    """One estimated-multiplier run per threshold; writes ``threshold_sweep.csv``.

    Per-episode ``v_c_hat`` trajectories stay in each run's metrics CSV.
    """
    if len(set(cfg.thresholds)) < 2:
        raise ConfigError("the sweep needs at least two distinct thresholds")
    runs = {tau: replace(cfg, method="sft_cop", fixed_lambda=None, threshold=tau)
            for tau in cfg.thresholds}
    _execute([(c, s) for c in runs.values() for s in c.seeds], cfg.workers, reuse)
    results = {tau: _result(c) for tau, c in runs.items()}
    rows = []
    for tau, res in results.items():
        for s in res.seeds:
            t = res.summaries[s]["totals"]
            v = read_metrics(res.metrics_path(s))["v_c_hat"]
            rows.append([repr(tau), s, t["failures"], repr(t["total_reward"]),
                         repr(t["safe_reward"]), repr(t["unsafe_reward"]),
                         repr(float(np.mean(v))), repr(float(v[-1]))])
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    _write_csv(Path(cfg.output_dir) / "threshold_sweep.csv", SWEEP_HEADER, rows)
    return results


# ---------------------------------------------------------- reading back

class SchemaError(ValueError):
    pass


_INT_COLS = {"task", "episode", "step", "failures"}


def read_metrics(path) -> dict[str, np.ndarray]:
    """Load a metrics CSV into columns, checking the header exactly."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        expected = list(MetricsRecord.CSV_HEADER)
        for col in header:
            if col not in expected:
                raise SchemaError(f"{path}: unexpected column {col!r}")
        for col in expected:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        if header != expected:
            raise SchemaError(f"{path}: columns out of order; expected {','.join(expected)}")
        rows = list(reader)
    cols = {}
    for j, name in enumerate(expected):
        dtype = np.int64 if name in _INT_COLS else np.float64
        try:
            cols[name] = np.array([r[j] for r in rows], dtype=dtype)
        except (ValueError, IndexError) as exc:
            raise SchemaError(f"{path}: bad value in column {name!r} ({exc})") from exc
    return cols
