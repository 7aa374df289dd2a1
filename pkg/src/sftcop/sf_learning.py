"""Tabular successor-feature learning with Lagrangian GPI.

Every task gets one new row in a :class:`SuccessorLibrary`. While a task is
trained its row is updated by SF-TD, the task's reward and utility weights are
regressed from observed signals, and actions come from GPI over all rows on
``w_r + lam * w_c``. The multiplier is re-estimated at the start state from the
library's value estimates (see :mod:`sftcop.dual`).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Hashable, Iterator, Mapping, Sequence

import numpy as np

from . import dual as dual_mod
from .core import MetricsRecord, PolicyEntry, Transition
from .gridworld import OBJECT_PICKED, TRAP_ENTERED, GridState

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LearnerConfig:
    alpha_sf: float = 0.5
    alpha_w: float = 0.5
    gamma: float = 0.95
    epsilon: float = 0.12
    episode_horizon: int = 200
    steps_per_task: int = 20_000
    dual_update_period: int = 1
    # "state": re-estimate wherever the agent is once the period has elapsed;
    # "episode_start": only at the first state of an episode
    dual_at: str = "state"
    init_from_previous: bool = True

    def __post_init__(self):
        for name in ("alpha_sf", "alpha_w"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.dual_at not in ("state", "episode_start"):
            raise ValueError(f"dual_at must be 'state' or 'episode_start', got {self.dual_at!r}")
        for name in ("episode_horizon", "steps_per_task", "dual_update_period"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# ------------------------------------------------------------------ updates

def sf_td_update(psi: np.ndarray, t: Transition, next_action: int, alpha: float,
                 gamma: float) -> np.ndarray:
    """SF-TD on a table indexed ``psi[state][action]``; updates in place and returns the new row.

    ``psi`` may be any mapping or array whose entries are ``(n_actions, d)`` blocks.
    """
    row = psi[t.state]
    phi = np.asarray(t.phi, dtype=np.float64)
    if phi.shape != row.shape[1:]:
        raise ValueError(f"dimension mismatch: phi {phi.shape} vs psi row {row.shape[1:]}")
    target = phi if t.done else phi + gamma * psi[t.next_state][next_action]
    row[t.action] += alpha * (target - row[t.action])
    return row[t.action]


def weight_update(w: np.ndarray, phi, observed: float, alpha: float) -> np.ndarray:
    """Least-mean-squares step towards ``observed = phi . w``; updates ``w`` in place."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != w.shape:
        raise ValueError(f"dimension mismatch: phi {phi.shape} vs w {w.shape}")
    w += alpha * (observed - float(phi @ w)) * phi
    return w


def gpi_action(state, library: Sequence[PolicyEntry], w_r, w_c, lam: float) -> int:
    """Best action over all entries on ``w_r + lam * w_c``; ties go to the lowest action."""
    if not library:
        raise ValueError("GPI needs at least one policy")
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    w = np.asarray(w_r, dtype=np.float64) + lam * np.asarray(w_c, dtype=np.float64)
    q = np.stack([entry.sf(state) for entry in library]) @ w
    return int(q.max(axis=0).argmax())


# ------------------------------------------------------------------ library

class _Column(Mapping):
    """Read-only view of one library row, used as a frozen entry's ``psi``."""

    def __init__(self, library: "SuccessorLibrary", index: int):
        self._lib = library
        self._k = index

    def __getitem__(self, state):
        if state not in self._lib._table:
            raise KeyError(state)
        row = self._lib.block(state)[self._k]
        row.flags.writeable = False
        return row

    def __iter__(self) -> Iterator:
        return iter(self._lib._table)

    def __len__(self) -> int:
        return len(self._lib._table)


class SuccessorLibrary:
    """Successor features of every policy, stored per state as an ``(n_policies, A, d)`` block.

    Rows are created lazily: when a state is first touched after new policies
    were added, the new rows start as a copy of the previous row (transfer
    initialisation) or at their initial value.

    Next to each block sits a mask of the ``(row, action)`` entries that were
    actually learned, either by an SF-TD update or by copying a learned entry.
    A frozen row's unlearned entries carry ``-inf`` in :meth:`cell`'s penalty
    so GPI never prefers an initial value over experience. The row being
    trained is never masked.
    """

    def __init__(self, n_actions: int, dim: int, init_noise: float = 0.0,
                 rng: np.random.Generator | None = None, mask_unlearned: bool = True):
        if init_noise < 0:
            raise ValueError("init_noise must be >= 0")
        if init_noise > 0 and rng is None:
            raise ValueError("noisy initialisation needs an rng")
        self.n_actions = n_actions
        self.dim = dim
        self.init_noise = float(init_noise)
        self.mask_unlearned = bool(mask_unlearned)
        self._rng = rng
        # state -> [psi block (n, A, d), learned mask (n, A), penalty (n, A)]
        self._table: dict = {}
        self._copy: list[bool] = []
        self.entries: list[PolicyEntry] = []

    @property
    def n_rows(self) -> int:
        return len(self._copy)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def training(self) -> bool:
        return len(self._copy) > len(self.entries)

    def states(self):
        return self._table.keys()

    def cell(self, state) -> list:
        c = self._table.get(state)
        if c is None:
            c = self._table[state] = self._fresh(len(self._copy))
        elif c[0].shape[0] < len(self._copy):
            c = self._table[state] = self._extend(c)
        return c

    def block(self, state) -> np.ndarray:
        return self.cell(state)[0]

    def learned(self, state) -> np.ndarray:
        return self.cell(state)[1]

    def mark(self, state, row: int, action: int) -> None:
        self.cell(state)[1][row, action] = True

    def _init_row(self) -> np.ndarray:
        if self.init_noise == 0.0:
            return np.zeros((self.n_actions, self.dim))
        return self._rng.uniform(-self.init_noise, self.init_noise, (self.n_actions, self.dim))

    def _penalty(self, known: np.ndarray) -> np.ndarray:
        pen = np.zeros(known.shape)
        if self.mask_unlearned:
            pen[~known] = -np.inf
        if self.training:
            pen[-1] = 0.0
        return pen

    def _fresh(self, n: int) -> list:
        # rows of a state nobody has visited hold their initial values
        blk = np.zeros((n, self.n_actions, self.dim))
        for k in range(n):
            blk[k] = blk[k - 1] if k > 0 and self._copy[k] else self._init_row()
        known = np.zeros((n, self.n_actions), dtype=bool)
        return [blk, known, self._penalty(known)]

    def _extend(self, c: list) -> list:
        blk, known = c[0], c[1]
        m, n = blk.shape[0], len(self._copy)
        new = np.zeros((n, self.n_actions, self.dim))
        new[:m] = blk
        nk = np.zeros((n, self.n_actions), dtype=bool)
        nk[:m] = known
        for k in range(m, n):
            if k > 0 and self._copy[k]:
                new[k] = new[k - 1]
                nk[k] = nk[k - 1]
            else:
                new[k] = self._init_row()
        return [new, nk, self._penalty(nk)]

    def begin_row(self, copy_previous: bool) -> int:
        if self.training:
            raise RuntimeError("the previous row has not been frozen")
        self._copy.append(bool(copy_previous) and len(self._copy) > 0)
        return len(self._copy) - 1

    def column(self, index: int) -> Mapping:
        return _Column(self, index)

    def freeze(self, index: int, training_dual: float, w_r, w_c, source_task_id: Hashable = None,
               metadata: dict | None = None) -> PolicyEntry:
        if index != len(self.entries) or index >= len(self._copy):
            raise ValueError(f"expected to freeze row {len(self.entries)}, got {index}")
        entry = PolicyEntry(psi=self.column(index), n_actions=self.n_actions, dim=self.dim,
                            training_dual=float(training_dual),
                            learned_reward_weights=np.array(w_r, dtype=np.float64),
                            learned_cost_weights=np.array(w_c, dtype=np.float64),
                            source_task_id=source_task_id, metadata=dict(metadata or {}))
        self.entries.append(entry)
        if self.mask_unlearned:
            for c in self._table.values():
                if c[0].shape[0] > index:
                    c[2][index] = np.where(c[1][index], 0.0, -np.inf)
        return entry

    def own_weight_matrix(self) -> np.ndarray:
        """Each frozen entry's greedy weights, one row per entry."""
        if not self.entries:
            return np.zeros((0, self.dim))
        return np.stack([e.own_weights() for e in self.entries])

    def dense(self) -> tuple[list, np.ndarray, np.ndarray]:
        """All states, a ``(n_states, n_rows, A, d)`` array with every row materialised and the learned masks."""
        states = list(self._table)
        arr = np.zeros((len(states), len(self._copy), self.n_actions, self.dim))
        known = np.zeros((len(states), len(self._copy), self.n_actions), dtype=bool)
        for j, s in enumerate(states):
            c = self.cell(s)
            arr[j], known[j] = c[0], c[1]
        return states, arr, known


# -------------------------------------------------------------- rng streams

class EpisodeStreams:
    """Independent generator per ``(seed, task, episode)``.

    Streams depend only on the indices, so runs are identical whatever order or
    process the tasks execute in.
    """

    def __init__(self, seed: int, task_index: int):
        self.seed = int(seed)
        self.task_index = int(task_index)

    def __call__(self, episode: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 1, self.task_index, int(episode)])


def _stream(rng) -> Callable[[int], np.random.Generator]:
    if isinstance(rng, np.random.Generator):
        return lambda episode: rng
    if callable(rng):
        return rng
    raise TypeError("rng must be a numpy Generator or a callable episode -> Generator")


# --------------------------------------------------------------- training

def _estimate_lambda(cell: list, own: np.ndarray, w_r: np.ndarray, w_c: np.ndarray,
                     tau: float, dual_cfg: dual_mod.DualConfig) -> tuple[float, bool]:
    """Values of every row at one state on the current weights, then the dual estimate.

    Each row acts greedily on its own weights among its learned actions; rows
    with nothing learned at this state sit out.
    """
    blk, pen = cell[0], cell[2]
    q_own = np.einsum("nad,nd->na", blk, own) + pen
    picks = q_own.argmax(axis=1)
    usable = np.isfinite(q_own[np.arange(blk.shape[0]), picks])
    psi = blk[np.arange(blk.shape[0]), picks][usable]
    v_r, v_c = psi @ w_r, psi @ w_c
    if v_c.min() >= tau:
        # every margin is nonnegative, so each projected step lands on zero
        return 0.0, False
    try:
        return dual_mod.estimate_dual(dual_mod.PolicyValues(v_r, v_c), tau, dual_cfg), False
    except dual_mod.DualDivergenceError as exc:
        log.debug("%s", exc)
        return min(exc.lam, dual_cfg.lambda_cap), True


def _run(env, library: SuccessorLibrary, cfg: LearnerConfig, dual_cfg: dual_mod.DualConfig | None,
         rng, *, tau: float | None, fixed_lambda: float | None, task_index: int,
         task_id: Hashable, on_event: Callable | None = None) -> tuple[PolicyEntry, list[MetricsRecord]]:
    streams = _stream(rng)
    k = library.begin_row(cfg.init_from_previous)
    prev = library.entries[-1] if library.entries else None
    if cfg.init_from_previous and prev is not None:
        w_r = prev.learned_reward_weights.copy()
        w_c = prev.learned_cost_weights.copy()
    else:
        w_r = np.zeros(library.dim)
        w_c = np.zeros(library.dim)
    own_frozen = library.own_weight_matrix()
    lam = 0.0 if fixed_lambda is None else float(fixed_lambda)
    if lam < 0:
        raise ValueError("fixed multiplier must be nonnegative")
    mc = dual_cfg is not None and dual_cfg.estimation_mode == dual_mod.MONTE_CARLO

    a_sf, a_w, gamma, eps = cfg.alpha_sf, cfg.alpha_w, cfg.gamma, cfg.epsilon
    n_actions = library.n_actions
    records: list[MetricsRecord] = []
    steps = 0
    last_estimate = None
    diverged = 0
    episode = 0
    estimating = fixed_lambda is None
    anywhere = cfg.dual_at == "state"
    while steps < cfg.steps_per_task:
        erng = streams(episode)
        s = env.reset()
        v_c_hat = math.nan
        lam_start = lam
        failures = 0
        total = safe = unsafe = 0.0
        a_greedy = -1
        for h in range(cfg.episode_horizon):
            if steps >= cfg.steps_per_task:
                break
            if estimating and (anywhere or h == 0) and (
                    last_estimate is None or steps - last_estimate >= cfg.dual_update_period):
                if mc:
                    lam = _estimate_lambda_mc(library, k, env, s, w_r, w_c, lam, tau, dual_cfg,
                                              erng, gamma)
                else:
                    own = np.vstack([own_frozen, (w_r + lam * w_c)[None, :]])
                    lam, div = _estimate_lambda(library.cell(s), own, w_r, w_c, tau, dual_cfg)
                    diverged += div
                last_estimate = steps
                a_greedy = -1
            if a_greedy < 0:
                blk, _, pen = library.cell(s)
                q = blk @ (w_r + lam * w_c) + pen
                a_greedy = int(q.max(axis=0).argmax())
            if h == 0:
                lam_start = lam
                v_c_hat = float(blk[int(q[:, a_greedy].argmax()), a_greedy] @ w_c)
            a = int(erng.integers(n_actions)) if erng.random() < eps else a_greedy
            t = env.step(s, a, erng)
            steps += 1
            phi = t.phi
            # regress both weight vectors on the observed signals
            w_r += a_w * (t.reward - float(phi @ w_r)) * phi
            w_c += a_w * (t.cost - float(phi @ w_c)) * phi
            total += t.reward
            for ev in t.events:
                if ev[0] == TRAP_ENTERED:
                    failures += 1
                elif ev[0] == OBJECT_PICKED:
                    if ev[2]:
                        unsafe += t.reward
                    else:
                        safe += t.reward
                if on_event is not None:
                    on_event(task_index, episode, steps, ev)
            c = library.cell(s)
            row = c[0][k]
            c[1][k, a] = True
            if t.done:
                row[a] += a_sf * (phi - row[a])
                break
            blk, _, pen = library.cell(t.next_state)
            q = blk @ (w_r + lam * w_c) + pen
            a_greedy = int(q.max(axis=0).argmax())
            row[a] += a_sf * (phi + gamma * blk[k, a_greedy] - row[a])
            s = t.next_state
        records.append(MetricsRecord(task_index, episode, steps, failures, total, safe, unsafe,
                                     v_c_hat, lam_start))
        episode += 1
    meta = {"episodes": episode, "steps": steps, "dual_divergences": diverged}
    entry = library.freeze(k, lam, w_r, w_c, source_task_id=task_id, metadata=meta)
    return entry, records


def _estimate_lambda_mc(library, k, env, s, w_r, w_c, lam, tau, dual_cfg, rng, gamma):
    current = PolicyEntry(library.column(k), library.n_actions, library.dim, lam, w_r, w_c)
    values = [dual_mod.estimate_values(e, w_r, w_c, s, dual_cfg, env, rng, gamma)
              for e in [*library.entries, current]]
    try:
        return dual_mod.estimate_dual(dual_mod.PolicyValues.from_pairs(values), tau, dual_cfg)
    except dual_mod.DualDivergenceError as exc:
        log.debug("%s", exc)
        return min(exc.lam, dual_cfg.lambda_cap)


def train_task(env, task, library: SuccessorLibrary, learner_cfg: LearnerConfig = LearnerConfig(),
               dual_cfg: dual_mod.DualConfig = dual_mod.DualConfig(), rng=None,
               fixed_lambda: float | None = None, task_index: int = 0,
               on_event: Callable | None = None) -> tuple[PolicyEntry, list[MetricsRecord]]:
    """Train one task with transfer from ``library`` and append its policy to the library.

    ``rng`` is a Generator shared by all episodes or a callable returning the
    generator of episode ``e`` (see :class:`EpisodeStreams`). With
    ``fixed_lambda`` set the multiplier is held constant and never estimated.
    ``on_event(task, episode, step, event)`` sees every environment event.
    """
    if rng is None:
        raise ValueError("an explicit rng is required")
    tau = None if fixed_lambda is not None else float(task.threshold)
    return _run(env, library, learner_cfg, dual_cfg, rng, tau=tau, fixed_lambda=fixed_lambda,
                task_index=task_index, task_id=task.task_id, on_event=on_event)


# -------------------------------------------------------------- checkpoints

def _encode_state(s):
    if isinstance(s, GridState):
        return {"grid": [int(s.position[0]), int(s.position[1]), int(s.picked)]}
    if isinstance(s, (int, np.integer)):
        return int(s)
    raise TypeError(f"cannot encode state {s!r}")


def _decode_state(doc):
    if isinstance(doc, dict):
        r, c, picked = doc["grid"]
        return GridState((r, c), picked)
    return int(doc)


def save_library(library: SuccessorLibrary, path) -> Path:
    """Write a checkpoint: one ``.npz`` holding the tables plus a JSON header."""
    path = Path(path)
    states, arr, known = library.dense()
    header = {
        "format": "sftcop-library",
        "version": CHECKPOINT_VERSION,
        "n_actions": library.n_actions,
        "dim": library.dim,
        "copy_flags": library._copy,
        "mask_unlearned": library.mask_unlearned,
        "states": [_encode_state(s) for s in states],
        "entries": [{"training_dual": e.training_dual, "source_task_id": e.source_task_id,
                     "metadata": e.metadata} for e in library.entries],
    }
    w = np.zeros((2, len(library.entries), library.dim))
    for i, e in enumerate(library.entries):
        w[0, i] = e.learned_reward_weights
        w[1, i] = e.learned_cost_weights
    with path.open("wb") as fh:
        np.savez(fh, psi=arr, learned=known, weights=w, header=np.array(json.dumps(header)))
    return path


def load_library(path) -> SuccessorLibrary:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        arr, known, w = data["psi"], data["learned"], data["weights"]
    if header.get("format") != "sftcop-library":
        raise ValueError(f"{path}: not a library checkpoint")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    lib = SuccessorLibrary(header["n_actions"], header["dim"],
                           mask_unlearned=header.get("mask_unlearned", True))
    lib._copy = [bool(f) for f in header["copy_flags"]]
    n_frozen = len(header["entries"])
    for j, doc in enumerate(header["states"]):
        pen = np.where(known[j], 0.0, -np.inf) if lib.mask_unlearned else np.zeros(known[j].shape)
        pen[n_frozen:] = 0.0
        lib._table[_decode_state(doc)] = [arr[j].copy(), known[j].copy(), pen]
    entries = []
    for i, e in enumerate(header["entries"]):
        entries.append(PolicyEntry(psi=lib.column(i), n_actions=lib.n_actions, dim=lib.dim,
                                   training_dual=e["training_dual"],
                                   learned_reward_weights=w[0, i], learned_cost_weights=w[1, i],
                                   source_task_id=e["source_task_id"], metadata=e["metadata"]))
    lib.entries = entries
    return lib
