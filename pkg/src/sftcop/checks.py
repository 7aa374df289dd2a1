"""Property suites on random instances, each checked against an exact oracle.

Every suite is seeded, returns a :class:`CheckReport` and never raises on a
violation; ``run_all`` backs the ``oracle-check`` command and the tests.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import TaskSpec, evaluate_q
from .dual import (DualConfig, DualDivergenceError, PolicyValues, analytic_dual_min,
                   consistency_experiment, dual_function, estimate_dual)
from .oracle import (TabularCMDP, TabularEnv, dp_successor_features, exact_policy_evaluation,
                     exact_q, gpi_bound, lagrangian_dual_value, phi_max, policy_matrix,
                     random_cmdp, solve_cmdp_exact, solve_mdp)
from .sf_learning import sf_td_update


@dataclass
class CheckReport:
    name: str
    instances: int
    violations: int
    worst: float  # largest observed statistic (error or bound excess)
    tolerance: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: {self.instances} instances, {self.violations} violations, "
                f"worst {self.worst:.3g} (tol {self.tolerance:g}), {self.seconds:.2f}s")


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        rep = fn(*args, **kwargs)
        rep.seconds = time.perf_counter() - t0
        return rep
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_policy_values(rng: np.random.Generator, max_policies: int = 8, scale: float = 5.0):
    """``(values, tau)`` with entries in ``[-scale, scale]`` and a bounded dual.

    The threshold is drawn between the smallest and largest utility value so at
    least one policy is feasible.
    """
    n = int(rng.integers(2, max_policies + 1))
    v_r = rng.uniform(-scale, scale, n)
    v_c = rng.uniform(-scale, scale, n)
    tau = float(rng.uniform(v_c.min(), v_c.max()))
    return PolicyValues(v_r, v_c), tau


# --------------------------------------------------------------- dual side

@_timed
def check_dual_convergence(n_instances: int = 10, iterations: int = 100_000, tol: float = 1e-3,
                           seed: int = 0) -> CheckReport:
    """Subgradient iterate after T steps with ``eta_t = 1/t`` vs the exact envelope minimiser."""
    rng = np.random.default_rng([seed, 10])
    cfg = DualConfig(iterations=iterations, schedule_constant=1.0)
    errs = []
    for _ in range(n_instances):
        values, tau = random_policy_values(rng)
        lam_star, _ = analytic_dual_min(values, tau)
        errs.append(abs(estimate_dual(values, tau, cfg) - lam_star))
    errs = np.array(errs)
    return CheckReport("dual convergence", n_instances, int((errs > tol).sum()), float(errs.max()),
                       tol, detail={"errors": errs.tolist()})


@_timed
def check_analytic_vs_grid(n_instances: int = 20, grid_points: int = 1_000_000,
                           seed: int = 0) -> CheckReport:
    """Envelope minimiser vs brute force on a uniform grid covering every breakpoint.

    A violation is a grid minimiser further than one grid step from the analytic
    one, or a grid minimum below the analytic minimum by more than rounding.
    """
    rng = np.random.default_rng([seed, 11])
    worst, bad = 0.0, 0
    for _ in range(n_instances):
        values, tau = random_policy_values(rng)
        lam_star, d_star = analytic_dual_min(values, tau)
        a, b = values.v_r, values.v_c - tau
        with np.errstate(divide="ignore", invalid="ignore"):
            cross = (a[:, None] - a[None, :]) / (b[None, :] - b[:, None])
        cross = cross[np.isfinite(cross) & (cross > 0)]
        hi = 1.5 * (cross.max() if cross.size else 1.0) + 1.0
        grid = np.linspace(0.0, hi, grid_points)
        d = dual_function(values, tau, grid)
        k = int(d.argmin())
        h = grid[1] - grid[0]
        dist = abs(grid[k] - lam_star) / h
        worst = max(worst, dist)
        if dist > 1.0 + 1e-9 or d[k] < d_star - 1e-9:
            bad += 1
    return CheckReport("analytic dual vs grid", n_instances, bad, worst, 1.0,
                       detail={"unit": "grid steps"})


# ------------------------------------------------------------ CMDP oracles

def _instance_shape(rng) -> tuple[int, int]:
    return int(rng.integers(2, 21)), int(rng.integers(2, 5))


@_timed
def check_strong_duality(n_instances: int = 30, tol: float = 1e-6, seed: int = 0) -> CheckReport:
    """LP optimum vs the exact dual function at the LP multiplier."""
    rng = np.random.default_rng([seed, 12])
    gaps, cross = [], []
    for _ in range(n_instances):
        S, A = _instance_shape(rng)
        cmdp = random_cmdp(rng, S, A, dim=int(rng.integers(2, 5)))
        sol = solve_cmdp_exact(cmdp)
        gaps.append(abs(sol.lp_value - lagrangian_dual_value(cmdp, sol.lam)))
        cross.append(abs(sol.lp_value - sol.v_r))
    gaps = np.array(gaps)
    return CheckReport("strong duality", n_instances, int((gaps > tol).sum()), float(gaps.max()),
                       tol, detail={"lp_vs_policy_value": float(max(cross))})


def _gpi(qs: np.ndarray) -> np.ndarray:
    # qs: (N, S, A); lowest-index action among ties of the upper envelope
    return qs.max(axis=0).argmax(axis=1)


@_timed
def check_gpi_improvement(n_instances: int = 20, tol: float = 1e-9, seed: int = 0) -> CheckReport:
    """GPI over exact Q functions is at least as good as every source, at every (s, a)."""
    rng = np.random.default_rng([seed, 13])
    worst, bad = -np.inf, 0
    for _ in range(n_instances):
        S, A = _instance_shape(rng)
        cmdp = random_cmdp(rng, S, A)
        task = cmdp.task
        lam = float(rng.uniform(0.0, 3.0))
        w = task.reward_weights + lam * task.cost_weights
        offset = lam * task.threshold
        n = int(rng.integers(2, 6))
        # sources: optimal policies of unrelated reward vectors plus random ones
        pols = []
        for i in range(n):
            if i % 2 == 0:
                pols.append(solve_mdp(cmdp, cmdp.reward_table(rng.uniform(-1, 1, cmdp.dim)))[2])
            else:
                pols.append(rng.integers(A, size=S))
        qs = np.stack([exact_q(p, cmdp, w) - offset for p in pols])
        pi = _gpi(qs)
        q_pi = exact_q(pi, cmdp, w) - offset
        excess = float((qs.max(axis=0) - q_pi).max())
        worst = max(worst, excess)
        bad += excess > tol
    return CheckReport("GPI improvement", n_instances, int(bad), worst, tol)


@_timed
def check_task_gap_bound(n_instances: int = 20, tol: float = 1e-9, seed: int = 0) -> CheckReport:
    """``Q_i^{pi_i*} - Q_i^{pi_j*} <= 2 delta_ij / (1 - gamma)`` at every (s, a)."""
    rng = np.random.default_rng([seed, 14])
    worst, bad = -np.inf, 0
    for _ in range(n_instances):
        S, A = _instance_shape(rng)
        cmdp = random_cmdp(rng, S, A)
        w_i, w_j = rng.uniform(-1, 1, cmdp.dim), rng.uniform(-1, 1, cmdp.dim)
        pi_i = solve_mdp(cmdp, cmdp.reward_table(w_i))[2]
        pi_j = solve_mdp(cmdp, cmdp.reward_table(w_j))[2]
        delta = float(np.abs(cmdp.phi @ (w_i - w_j)).max())
        gap = exact_q(pi_i, cmdp, w_i) - exact_q(pi_j, cmdp, w_i)
        excess = float((gap - 2.0 * delta / (1.0 - cmdp.gamma)).max())
        worst = max(worst, excess)
        bad += excess > tol
    return CheckReport("task gap bound", n_instances, int(bad), worst, tol)


def _complete_policy(cmdp: TabularCMDP, sol) -> np.ndarray:
    """LP policy on visited states, greedy on the optimal Lagrangian Q elsewhere."""
    task = cmdp.task
    r_sa = cmdp.reward_table(task.reward_weights + sol.lam * task.cost_weights)
    _, _, greedy = solve_mdp(cmdp, r_sa)
    pi = policy_matrix(greedy, cmdp.n_states, cmdp.n_actions)
    visited = sol.occupancy.sum(axis=1) > 1e-12
    pi[visited] = sol.policy[visited]
    return pi


def _lagrangian_q(pi, cmdp: TabularCMDP, lam: float) -> np.ndarray:
    task = cmdp.task
    return exact_q(pi, cmdp, task.reward_weights + lam * task.cost_weights) - lam * task.threshold


def transfer_pair(rng: np.random.Generator, n_sources: int = 2, n_states: int | None = None,
                  n_actions: int | None = None, gamma: float = 0.9):
    """Sources and a target sharing dynamics, features and a threshold in ``(0, 1/(1-gamma)]``.

    Utilities lie in [0, 1]. The threshold is chosen feasible for every task.
    """
    if n_states is None or n_actions is None:
        n_states, n_actions = _instance_shape(rng)
    base = random_cmdp(rng, n_states, n_actions, gamma=gamma)
    tasks = []
    for _ in range(n_sources + 1):
        w_r = rng.uniform(-1.0, 1.0, base.dim)
        w_c = rng.dirichlet(np.ones(base.dim)) * rng.uniform(0.5, 1.0)
        tasks.append((w_r, w_c))
    # the tightest threshold every task can still meet
    best = min(solve_mdp(base, base.reward_table(w_c))[0][base.start] for _, w_c in tasks)
    tau = float(rng.uniform(0.1, 0.9)) * best
    cmdps = [base.with_task(TaskSpec(w_r, w_c, threshold=tau, gamma=gamma)) for w_r, w_c in tasks]
    return cmdps[:-1], cmdps[-1]


@_timed
def check_transfer_bound(n_instances: int = 50, tol: float = 1e-9, seed: int = 0,
                         eps: float = 0.0) -> CheckReport:
    """Realised Lagrangian-Q gap of the transfer policy vs ``gpi_bound`` at every (s, a).

    Exact source Q functions (``eps = 0``); the transfer multiplier comes from
    the subgradient estimate over the sources' values on the target.
    """
    rng = np.random.default_rng([seed, 15])
    worst, bad, slack = -np.inf, 0, []
    cfg = DualConfig(iterations=20_000, schedule_constant=1.0)
    for _ in range(n_instances):
        sources, target = transfer_pair(rng, n_sources=int(rng.integers(1, 4)))
        tj = target.task
        sol_j = solve_cmdp_exact(target)
        pi_j = _complete_policy(target, sol_j)
        src_pis, src_lams = [], []
        for src in sources:
            sol = solve_cmdp_exact(src)
            src_pis.append(_complete_policy(src, sol))
            src_lams.append(sol.lam)
        vals = [(exact_policy_evaluation(p, target, tj.reward_weights)[target.start],
                 exact_policy_evaluation(p, target, tj.cost_weights)[target.start]) for p in src_pis]
        try:
            lam_tilde = estimate_dual(PolicyValues.from_pairs(vals), tj.threshold, cfg)
        except DualDivergenceError as exc:
            lam_tilde = exc.lam
        qs = np.stack([_lagrangian_q(p, target, lam_tilde) for p in src_pis])
        pi = _gpi(qs)
        gap = _lagrangian_q(pi_j, target, sol_j.lam) - _lagrangian_q(pi, target, lam_tilde)
        bound = gpi_bound([s.task.reward_weights for s in sources], tj.reward_weights,
                          [s.task.cost_weights for s in sources], tj.cost_weights,
                          src_lams, sol_j.lam, lam_tilde, eps, tj.threshold, tj.gamma,
                          phi_max(target))
        excess = float(gap.max() - bound)
        worst = max(worst, excess)
        slack.append(-excess)
        bad += excess > tol
    return CheckReport("transfer bound", n_instances, int(bad), worst, tol,
                       detail={"min_slack": float(min(slack))})


# -------------------------------------------------------- successor features

def grid_cmdp(size: int = 5, dim: int = 4, gamma: float = 0.9, seed: int = 0) -> TabularCMDP:
    """Deterministic ``size x size`` grid, four moves, walls at the border; random features."""
    rng = np.random.default_rng([seed, 16])
    S = size * size
    P = np.zeros((S, 4, S))
    moves = ((-1, 0), (1, 0), (0, -1), (0, 1))
    for s in range(S):
        r, c = divmod(s, size)
        for a, (dr, dc) in enumerate(moves):
            nr, nc = min(max(r + dr, 0), size - 1), min(max(c + dc, 0), size - 1)
            P[s, a, nr * size + nc] = 1.0
    phi = rng.uniform(0.0, 1.0, size=(S, 4, S, dim))
    task = TaskSpec(rng.uniform(-1, 1, dim), rng.dirichlet(np.ones(dim)), threshold=0.0, gamma=gamma)
    return TabularCMDP(P, phi, task)


@_timed
def check_sf_td(steps: int = 100_000, alpha: float = 0.5, tol: float = 1e-2,
                eval_tol: float = 1e-8, seed: int = 0) -> CheckReport:
    """TD-learned SFs of a fixed policy vs the DP fixed point on the 5x5 grid.

    Behaviour is uniform over actions so every pair keeps being updated; the
    bootstrap uses the evaluated policy. Also checks ``psi . w`` against exact
    policy evaluation.
    """
    cmdp = grid_cmdp(seed=seed)
    rng = np.random.default_rng([seed, 17])
    policy = rng.integers(4, size=cmdp.n_states)
    psi_dp = dp_successor_features(policy, cmdp)
    env = TabularEnv(cmdp)
    psi = {s: np.zeros((4, cmdp.dim)) for s in range(cmdp.n_states)}
    s = env.reset()
    for _ in range(steps):
        a = int(rng.integers(4))
        t = env.step(s, a, rng)
        sf_td_update(psi, t, int(policy[t.next_state]), alpha, cmdp.gamma)
        s = t.next_state
    learned = np.stack([psi[s] for s in range(cmdp.n_states)])
    td_gap = float(np.abs(learned - psi_dp).max())
    q_sf = evaluate_q(psi_dp, cmdp.task.reward_weights)
    q_exact = exact_q(policy, cmdp, cmdp.task.reward_weights)
    eval_gap = float(np.abs(q_sf - q_exact).max())
    bad = int(td_gap > tol) + int(eval_gap > eval_tol)
    return CheckReport("successor features", 2, bad, td_gap, tol,
                       detail={"td_gap": td_gap, "evaluation_gap": eval_gap})


# ---------------------------------------------------------------- consistency

def consistency_instance(seed: int = 0, n_states: int = 6, n_actions: int = 3,
                         min_margin: float = 0.05, max_tries: int = 1000):
    """Seeded search for a CMDP and three deterministic policies with an interior multiplier.

    Accepts the first draw whose best-reward policy violates the constraint, some
    policy satisfies it, every margin is at least ``min_margin`` in size and the
    multiplier lies in ``(0.1, 10)``.
    """
    rng = np.random.default_rng([seed, 18])
    for _ in range(max_tries):
        cmdp = random_cmdp(rng, n_states, n_actions, gamma=0.8)
        pols = [rng.integers(n_actions, size=n_states) for _ in range(3)]
        task = cmdp.task
        v = [(exact_policy_evaluation(p, cmdp, task.reward_weights)[0],
              exact_policy_evaluation(p, cmdp, task.cost_weights)[0]) for p in pols]
        values = PolicyValues.from_pairs(v)
        m = values.v_c - task.threshold
        if np.abs(m).min() < min_margin or m.max() <= 0:
            continue
        if m[int(values.v_r.argmax())] >= 0:
            continue
        lam, _ = analytic_dual_min(values, task.threshold)
        if 0.1 < lam < 10.0:
            return cmdp, pols
    raise RuntimeError("no suitable consistency instance found")


@_timed
def check_consistency(k_list=(10, 100, 1000), seeds=(0, 1, 2, 3, 4), seed: int = 0):
    """Median multiplier error over seeds must fall as the rollout count grows."""
    cmdp, pols = consistency_instance(seed)
    res = consistency_experiment(cmdp, pols, 0, k_list, seeds)
    med = [res.summary()[k]["median"] for k in k_list]
    drops = [b < a for a, b in zip(med, med[1:])]
    return CheckReport("consistency", len(k_list), drops.count(False), float(med[-1]), 0.0,
                       detail={"medians": dict(zip(k_list, med)), "lambda_star": res.lambda_star,
                               "result": res})


SUITES = {
    "dual_convergence": check_dual_convergence,
    "analytic_vs_grid": check_analytic_vs_grid,
    "strong_duality": check_strong_duality,
    "gpi_improvement": check_gpi_improvement,
    "task_gap_bound": check_task_gap_bound,
    "transfer_bound": check_transfer_bound,
    "sf_td": check_sf_td,
    "consistency": check_consistency,
}


def run_all(seed: int = 0, only=None) -> list[CheckReport]:
    names = list(SUITES) if not only else list(only)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites: {unknown}; choose from {list(SUITES)}")
    return [SUITES[n](seed=seed) for n in names]
