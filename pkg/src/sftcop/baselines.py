"""Comparison learners.

SFQL transfers successor features exactly like the constrained learner but
folds the utility into the reward with unit weight and never looks at the
threshold. PDQL learns each task from scratch with two Q tables and a
multiplier updated by projected steps once per episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import MetricsRecord, PolicyEntry
from .gridworld import OBJECT_PICKED, TRAP_ENTERED
from .sf_learning import LearnerConfig, SuccessorLibrary, _run, _stream


def sfql_train_task(env, task, library: SuccessorLibrary, cfg: LearnerConfig = LearnerConfig(),
                    rng=None, task_index: int = 0,
                    on_event: Callable | None = None) -> tuple[PolicyEntry, list[MetricsRecord]]:
    """SF Q-learning on ``r + c``; GPI uses ``psi . (w_r + w_c)``.

    Only ``task.task_id`` is read from ``task``.
    """
    if rng is None:
        raise ValueError("an explicit rng is required")
    return _run(env, library, cfg, None, rng, tau=None, fixed_lambda=1.0,
                task_index=task_index, task_id=task.task_id, on_event=on_event)


@dataclass(frozen=True)
class PDQLConfig:
    alpha: float = 0.5
    gamma: float = 0.95
    epsilon: float = 0.12
    episode_horizon: int = 200
    steps_per_task: int = 20_000
    # episode e uses eta0 / (e + 1) ** decay
    eta0: float = 0.5
    decay: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.episode_horizon < 1 or self.steps_per_task < 1:
            raise ValueError("horizon and steps must be positive")
        if not self.eta0 > 0 or self.decay < 0:
            raise ValueError("need eta0 > 0 and decay >= 0")


@dataclass
class PDQLTables:
    n_actions: int
    q_r: dict = field(default_factory=dict)
    q_c: dict = field(default_factory=dict)
    lam: float = 0.0
    lam_history: list = field(default_factory=list)

    def rows(self, state) -> tuple[np.ndarray, np.ndarray]:
        r = self.q_r.get(state)
        if r is None:
            r = self.q_r[state] = np.zeros(self.n_actions)
            self.q_c[state] = np.zeros(self.n_actions)
        return r, self.q_c[state]

    def greedy(self, state, lam: float | None = None) -> int:
        r, c = self.rows(state)
        return int(np.argmax(r + (self.lam if lam is None else lam) * c))


def pdql_train_task(env, task, cfg: PDQLConfig = PDQLConfig(), rng=None, task_index: int = 0,
                    on_event: Callable | None = None) -> tuple[PDQLTables, list[MetricsRecord]]:
    """Primal-dual Q-learning on one task with fresh tables.

    The multiplier moves once per episode by
    ``lam <- max(0, lam - eta_e * (Q_c(s0, a*) - tau))`` where ``a*`` is the
    greedy action at the start state.
    """
    if rng is None:
        raise ValueError("an explicit rng is required")
    streams = _stream(rng)
    tau = float(task.threshold)
    tables = PDQLTables(env.n_actions)
    alpha, gamma, eps = cfg.alpha, cfg.gamma, cfg.epsilon
    records = []
    steps = episode = 0
    while steps < cfg.steps_per_task:
        erng = streams(episode)
        lam = tables.lam
        s = s0 = env.reset()
        a_greedy = tables.greedy(s)
        v_c_hat = float(tables.rows(s)[1][a_greedy])
        failures = 0
        total = safe = unsafe = 0.0
        for _ in range(cfg.episode_horizon):
            if steps >= cfg.steps_per_task:
                break
            a = int(erng.integers(env.n_actions)) if erng.random() < eps else a_greedy
            t = env.step(s, a, erng)
            steps += 1
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
            qr, qc = tables.rows(s)
            if t.done:
                qr[a] += alpha * (t.reward - qr[a])
                qc[a] += alpha * (t.cost - qc[a])
                break
            nr, nc = tables.rows(t.next_state)
            a_greedy = int(np.argmax(nr + lam * nc))
            qr[a] += alpha * (t.reward + gamma * nr[a_greedy] - qr[a])
            qc[a] += alpha * (t.cost + gamma * nc[a_greedy] - qc[a])
            s = t.next_state
        records.append(MetricsRecord(task_index, episode, steps, failures, total, safe, unsafe,
                                     v_c_hat, lam))
        qr0, qc0 = tables.rows(s0)
        a0 = int(np.argmax(qr0 + lam * qc0))
        eta = cfg.eta0 / (episode + 1) ** cfg.decay
        tables.lam = max(0.0, lam - eta * (float(qc0[a0]) - tau))
        tables.lam_history.append(tables.lam)
        episode += 1
    return tables, records
