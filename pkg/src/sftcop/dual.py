"""Estimating the optimal multiplier of a target task from a finite set of source policies.

Given values ``(V_r_i, V_c_i)`` of N source policies on the target task, the
relaxed dual is the upper envelope

    d(lam) = max_i  V_r_i + lam * (V_c_i - tau),     lam >= 0,

a convex piecewise-linear function. Its minimiser is found either by projected
subgradient descent with steps ``c / t`` or exactly from the envelope breakpoints.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import PolicyEntry

log = logging.getLogger(__name__)

SF_DOT_PRODUCT = "sf_dot_product"
MONTE_CARLO = "monte_carlo"


class DualDivergenceError(RuntimeError):
    """The multiplier left the configured cap: the constraint is probably infeasible."""

    def __init__(self, lam: float, iteration: int, cap: float):
        super().__init__(f"multiplier reached {lam:.6g} > cap {cap:.6g} at iteration {iteration}; "
                         "no source policy appears to satisfy the constraint")
        self.lam = lam
        self.iteration = iteration


class InfeasibleDualError(ValueError):
    """Every source policy violates the constraint, so the dual is unbounded below."""


@dataclass(frozen=True)
class PolicyValues:
    v_r: np.ndarray
    v_c: np.ndarray

    def __post_init__(self):
        v_r = np.array(self.v_r, dtype=np.float64).reshape(-1)
        v_c = np.array(self.v_c, dtype=np.float64).reshape(-1)
        if v_r.shape != v_c.shape:
            raise ValueError(f"value lists differ in length: {v_r.shape} vs {v_c.shape}")
        if v_r.size == 0:
            raise ValueError("at least one policy value is required")
        if not (np.all(np.isfinite(v_r)) and np.all(np.isfinite(v_c))):
            raise ValueError("policy values must be finite")
        object.__setattr__(self, "v_r", v_r)
        object.__setattr__(self, "v_c", v_c)

    @classmethod
    def from_pairs(cls, pairs) -> "PolicyValues":
        arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1])

    def __len__(self) -> int:
        return self.v_r.size


@dataclass(frozen=True)
class DualConfig:
    """``iterations`` is T and ``schedule_constant`` the c in the step ``c / t``."""

    iterations: int = 500
    schedule_constant: float = 1000.0
    estimation_mode: str = SF_DOT_PRODUCT
    rollouts: int = 1
    rollout_horizon: int = 200
    lambda_cap: float = 1e6
    # "constraint" steps along V_c - tau; "printed" reproduces the V_r - tau variant.
    subgradient: str = "constraint"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.schedule_constant > 0:
            raise ValueError("schedule_constant must be > 0")
        if self.estimation_mode not in (SF_DOT_PRODUCT, MONTE_CARLO):
            raise ValueError(f"unknown estimation mode {self.estimation_mode!r}")
        if self.rollouts < 1:
            raise ValueError("rollouts must be >= 1")
        if self.subgradient not in ("constraint", "printed"):
            raise ValueError(f"unknown subgradient rule {self.subgradient!r}")


def step_schedule(t: int, c: float) -> float:
    if t < 1 or not c > 0:
        raise ValueError("need t >= 1 and c > 0")
    return c / t


def dual_function(values: PolicyValues, tau: float, lam) -> float | np.ndarray:
    """Evaluate ``d(lam)``; ``lam`` may be an array of grid points."""
    lam = np.asarray(lam, dtype=np.float64)
    lines = values.v_r[:, None] + np.outer(values.v_c - tau, lam.reshape(-1))
    out = lines.max(axis=0)
    return float(out[0]) if lam.ndim == 0 else out.reshape(lam.shape)


def _select(v_r: Sequence[float], margins: Sequence[float], lam: float) -> int:
    # argmax with ties to the lowest index
    best_i, best = 0, v_r[0] + lam * margins[0]
    for i in range(1, len(v_r)):
        val = v_r[i] + lam * margins[i]
        if val > best:
            best_i, best = i, val
    return best_i


def dual_update_step(lam: float, values: PolicyValues, tau: float, eta: float,
                     subgradient: str = "constraint") -> tuple[int, float]:
    """One alternating update: pick the best policy at ``lam``, then a projected step."""
    if lam < 0 or not eta > 0:
        raise ValueError("need lam >= 0 and eta > 0")
    margins = values.v_c - tau
    i = _select(values.v_r.tolist(), margins.tolist(), lam)
    g = margins[i] if subgradient == "constraint" else values.v_r[i] - tau
    return i, max(0.0, lam - eta * float(g))


def estimate_dual(values: PolicyValues, tau: float, cfg: DualConfig = DualConfig()) -> float:
    """Run T projected subgradient iterations from ``lam = 0`` with ``eta_t = c / t``.

    Raises
    ------
    DualDivergenceError
        if the multiplier exceeds ``cfg.lambda_cap``.
    """
    a = values.v_r
    m = values.v_c - tau
    g = m if cfg.subgradient == "constraint" else a - tau
    if len(a) > 2:
        # a line weakly below an earlier one in both intercept and slope is
        # never selected for lam >= 0 (rounding is monotone, ties go low)
        dom = np.triu((a[:, None] >= a[None, :]) & (m[:, None] >= m[None, :]), 1).any(axis=0)
        if dom.any():
            keep = ~dom
            a, m, g = a[keep], m[keep], g[keep]
    v_r, margins, grads = a.tolist(), m.tolist(), g.tolist()
    c, cap, T = float(cfg.schedule_constant), cfg.lambda_cap, cfg.iterations
    n = len(v_r)
    lam = 0.0
    if grads[_select(v_r, margins, 0.0)] >= 0.0:
        # the first step projects back to zero, and so does every later one
        return 0.0
    eta = None
    t, same, chunk = 1, 0, 16
    prev = -1
    while t <= T:
        best_i, best = 0, v_r[0] + lam * margins[0]
        for i in range(1, n):
            val = v_r[i] + lam * margins[i]
            if val > best:
                best_i, best = i, val
        same = same + 1 if best_i == prev else 0
        prev = best_i
        if same >= 3 and T - t >= 8:
            # Long stretch with a fixed selection: take many steps at once. The
            # accumulate repeats the sequential float arithmetic, so the result
            # is bit-identical to stepping one by one.
            if eta is None:
                eta = c / np.arange(1, T + 1, dtype=np.float64)
            L = min(chunk, T - t + 1)
            seq = np.subtract.accumulate(np.concatenate(([lam], eta[t - 1:t - 1 + L] * g[best_i])))[1:]
            sel = (a[:, None] + seq[None, :] * m[:, None]).argmax(axis=0)
            stop = (seq < 0.0) | (seq > cap) | (sel != best_i)
            q = int(stop.argmax()) if stop.any() else L - 1
            lam = float(seq[q])
            t += q + 1
            chunk = chunk * 2 if not stop.any() else 16
        else:
            lam -= c / t * grads[best_i]
            t += 1
        if lam < 0.0:
            lam = 0.0
        elif lam > cap:
            raise DualDivergenceError(lam, t - 1, cap)
    return lam


def analytic_dual_min(values: PolicyValues, tau: float) -> tuple[float, float]:
    """Exact minimiser of the upper envelope over ``lam >= 0``.

    The minimum of a convex piecewise-linear function is attained at 0 or at a
    breakpoint, so every pairwise intersection is a candidate; ties go to the
    smallest multiplier.
    """
    a = values.v_r
    b = values.v_c - tau
    if np.all(b < 0):
        raise InfeasibleDualError("all constraint margins are negative; the dual is unbounded below")
    cands = [0.0]
    n = a.size
    for i in range(n):
        for j in range(i + 1, n):
            if b[i] != b[j]:
                lam = (a[j] - a[i]) / (b[i] - b[j])
                if lam > 0:
                    cands.append(float(lam))
    cands = np.array(sorted(set(cands)))
    d = dual_function(values, tau, cands)
    k = int(np.argmin(d))
    return float(cands[k]), float(d[k])


# --------------------------------------------------------------------- values

def rollout_returns(policy: Callable, env, state, w_r, w_c, gamma: float, n_rollouts: int,
                    horizon: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Discounted reward and utility returns of ``n_rollouts`` trajectories from ``state``."""
    if n_rollouts < 1:
        raise ValueError("need at least one rollout")
    w_r = np.asarray(w_r, dtype=np.float64)
    w_c = np.asarray(w_c, dtype=np.float64)
    g_r = np.zeros(n_rollouts)
    g_c = np.zeros(n_rollouts)
    for k in range(n_rollouts):
        s, disc, acc_r, acc_c = state, 1.0, 0.0, 0.0
        for _ in range(horizon):
            tr = env.step(s, policy(s), rng)
            acc_r += disc * float(tr.phi @ w_r)
            acc_c += disc * float(tr.phi @ w_c)
            if tr.done:
                break
            disc *= gamma
            s = tr.next_state
        g_r[k], g_c[k] = acc_r, acc_c
    return g_r, g_c


def estimate_values(entry: PolicyEntry, w_r, w_c, state, cfg: DualConfig = DualConfig(),
                    env=None, rng: np.random.Generator | None = None,
                    gamma: float | None = None) -> tuple[float, float]:
    """Values of a source policy on the target weights at ``state``.

    The source acts greedily under its own criterion (its learned weights and
    training multiplier). ``sf_dot_product`` reads the values off its successor
    features; ``monte_carlo`` averages ``cfg.rollouts`` discounted returns.
    """
    if cfg.estimation_mode == SF_DOT_PRODUCT:
        psi = entry.sf(state)[entry.greedy_action(state)]
        return float(psi @ np.asarray(w_r)), float(psi @ np.asarray(w_c))
    if env is None or rng is None or gamma is None:
        raise ValueError("monte_carlo estimation needs env, rng and gamma")
    g_r, g_c = rollout_returns(entry.greedy_action, env, state, w_r, w_c, gamma,
                               cfg.rollouts, cfg.rollout_horizon, rng)
    return float(g_r.mean()), float(g_c.mean())


# ---------------------------------------------------------------- consistency

CONSISTENCY_HEADER = ("K", "seed", "lambda_hat", "lambda_star", "abs_error")


@dataclass
class ConsistencyResult:
    rows: list[tuple[int, int, float, float, float]]
    lambda_star: float

    def summary(self) -> dict[int, dict[str, float]]:
        out = {}
        for k in sorted({r[0] for r in self.rows}):
            errs = np.array([r[4] for r in self.rows if r[0] == k])
            out[k] = {"median": float(np.median(errs)), "q25": float(np.quantile(errs, 0.25)),
                      "q75": float(np.quantile(errs, 0.75)), "max": float(errs.max()),
                      "n": int(errs.size)}
        return out

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CONSISTENCY_HEADER)
            for k, seed, lam_hat, lam_star, err in self.rows:
                w.writerow([k, seed, repr(lam_hat), repr(lam_star), repr(err)])
        return path


def consistency_experiment(cmdp, policies: Sequence, state: int, k_list: Sequence[int],
                           seeds: Sequence[int], cfg: DualConfig = DualConfig(iterations=20000, schedule_constant=1.0),
                           horizon: int | None = None) -> ConsistencyResult:
    """Distance between the plug-in multiplier from K-rollout value estimates and the exact one.

    ``policies`` are deterministic tabular policies (one action per state) on
    ``cmdp``; their exact values come from the linear-system oracle.
    """
    from .oracle import TabularEnv, exact_policy_evaluation, policy_matrix

    task = cmdp.task
    gamma, tau = task.gamma, task.threshold
    exact = []
    for pol in policies:
        pm = policy_matrix(pol, cmdp.n_states, cmdp.n_actions)
        exact.append((exact_policy_evaluation(pm, cmdp, task.reward_weights)[state],
                      exact_policy_evaluation(pm, cmdp, task.cost_weights)[state]))
    lam_star, _ = analytic_dual_min(PolicyValues.from_pairs(exact), tau)
    if horizon is None:
        # truncation bias below 1e-10 of the return scale
        horizon = int(np.ceil(np.log(1e-10) / np.log(gamma))) if gamma > 0 else 1
    env = TabularEnv(cmdp)
    rows = []
    for k in k_list:
        for seed in seeds:
            rng = np.random.default_rng([int(seed), int(k)])
            est = []
            for pol in policies:
                pol = np.asarray(pol)
                g_r, g_c = rollout_returns(lambda s, p=pol: int(p[s]), env, state,
                                           task.reward_weights, task.cost_weights, gamma,
                                           int(k), horizon, rng)
                est.append((g_r.mean(), g_c.mean()))
            try:
                lam_hat = estimate_dual(PolicyValues.from_pairs(est), tau, cfg)
            except DualDivergenceError as exc:
                log.warning("K=%d seed=%d: %s", k, seed, exc)
                lam_hat = exc.lam
            rows.append((int(k), int(seed), float(lam_hat), float(lam_star),
                         float(abs(lam_hat - lam_star))))
    return ConsistencyResult(rows, float(lam_star))
