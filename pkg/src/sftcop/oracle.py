"""Exact machinery for small tabular CMDPs.

Everything here solves linear systems or a linear program, so the results are
exact up to floating point and serve as ground truth for the learners.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .core import TaskSpec, Transition

_STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class TabularCMDP:
    """Finite CMDP with features on ``(s, a, s')`` and a fixed start state.

    ``transitions[s, a, s']`` is P(s' | s, a); ``phi[s, a, s']`` the feature vector.
    """

    transitions: np.ndarray
    phi: np.ndarray
    task: TaskSpec
    start: int = 0

    def __post_init__(self):
        P = np.array(self.transitions, dtype=np.float64)
        phi = np.array(self.phi, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transitions must have shape (S, A, S), got {P.shape}")
        if phi.shape[:3] != P.shape or phi.ndim != 4:
            raise ValueError(f"phi must have shape {P.shape + ('d',)}, got {phi.shape}")
        if phi.shape[3] != self.task.dim:
            raise ValueError("feature dimension does not match the task weights")
        _check_stochastic(P)
        if not 0 <= self.start < P.shape[0]:
            raise ValueError(f"start state {self.start} out of range")
        P.flags.writeable = False
        phi.flags.writeable = False
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "phi", phi)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def dim(self) -> int:
        return self.phi.shape[3]

    @property
    def gamma(self) -> float:
        return self.task.gamma

    def with_task(self, task: TaskSpec) -> "TabularCMDP":
        return TabularCMDP(self.transitions, self.phi, task, self.start)

    def expected_features(self) -> np.ndarray:
        """``E[phi(s, a, s')]`` over the next state, shape (S, A, d)."""
        return np.einsum("sap,sapd->sad", self.transitions, self.phi)

    def reward_table(self, weights) -> np.ndarray:
        return self.expected_features() @ np.asarray(weights, dtype=np.float64)


def _check_stochastic(P: np.ndarray) -> None:
    if np.any(P < 0):
        raise ValueError("transition probabilities must be nonnegative")
    err = np.abs(P.sum(axis=-1) - 1.0).max()
    if err > _STOCHASTIC_TOL * P.shape[-1]:
        raise ValueError(f"transition rows must sum to 1 (max error {err:.3g})")


@dataclass(frozen=True)
class ExactSolution:
    feasible: bool
    policy: np.ndarray | None = None  # (S, A) action probabilities
    v_r: float = math.nan
    v_c: float = math.nan
    lam: float = math.nan
    occupancy: np.ndarray | None = None  # (S, A), sums to 1 / (1 - gamma)
    lp_value: float = math.nan
    status: str = ""


def random_cmdp(rng: np.random.Generator, n_states: int, n_actions: int, dim: int = 3,
                gamma: float = 0.9, tau_quantile: float | None = None,
                deterministic: bool = False) -> TabularCMDP:
    """Random instance: Dirichlet kernel rows, features uniform on [0, 1].

    Reward weights are uniform on [-1, 1]; utility weights are nonnegative and sum
    to at most 1, so utilities stay in [0, 1]. The threshold sits at
    ``tau_quantile`` between the smallest and largest achievable utility value
    (drawn uniformly from [0.1, 0.9] when not given), which keeps it feasible.
    """
    if deterministic:
        P = np.zeros((n_states, n_actions, n_states))
        nxt = rng.integers(n_states, size=(n_states, n_actions))
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    phi = rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_states, dim))
    w_r = rng.uniform(-1.0, 1.0, size=dim)
    w_c = rng.dirichlet(np.ones(dim)) * rng.uniform(0.5, 1.0)
    probe = TabularCMDP(P, phi, TaskSpec(w_r, w_c, threshold=0.0, gamma=gamma))
    c_sa = probe.reward_table(w_c)
    hi = solve_mdp(probe, c_sa)[0][probe.start]
    lo = -solve_mdp(probe, -c_sa)[0][probe.start]
    q = rng.uniform(0.1, 0.9) if tau_quantile is None else tau_quantile
    tau = lo + q * (hi - lo)
    return probe.with_task(TaskSpec(w_r, w_c, threshold=tau, gamma=gamma))


def policy_matrix(policy, n_states: int, n_actions: int) -> np.ndarray:
    """Accept a deterministic policy (one action per state) or an (S, A) matrix."""
    pol = np.asarray(policy)
    if pol.ndim == 1:
        out = np.zeros((n_states, n_actions))
        out[np.arange(n_states), pol.astype(int)] = 1.0
        return out
    pol = pol.astype(np.float64)
    if pol.shape != (n_states, n_actions):
        raise ValueError(f"policy must have shape {(n_states, n_actions)}, got {pol.shape}")
    if np.any(pol < -1e-12) or np.abs(pol.sum(axis=1) - 1).max() > 1e-9:
        raise ValueError("policy rows must be probability distributions")
    return pol


def _next_state_operator(policy: np.ndarray, cmdp: TabularCMDP) -> np.ndarray:
    """State-to-state kernel under ``policy``."""
    return np.einsum("sa,sap->sp", policy, cmdp.transitions)


def exact_policy_evaluation(policy, cmdp: TabularCMDP, reward_weights) -> np.ndarray:
    """Solve ``(I - gamma P_pi) V = r_pi`` for the state values."""
    pi = policy_matrix(policy, cmdp.n_states, cmdp.n_actions)
    r_pi = (pi * cmdp.reward_table(reward_weights)).sum(axis=1)
    A = np.eye(cmdp.n_states) - cmdp.gamma * _next_state_operator(pi, cmdp)
    return np.linalg.solve(A, r_pi)


def exact_q(policy, cmdp: TabularCMDP, reward_weights) -> np.ndarray:
    v = exact_policy_evaluation(policy, cmdp, reward_weights)
    return cmdp.reward_table(reward_weights) + cmdp.gamma * cmdp.transitions @ v


def _evaluate_table(pi: np.ndarray, cmdp: TabularCMDP, r_sa: np.ndarray) -> np.ndarray:
    r_pi = (pi * r_sa).sum(axis=1)
    A = np.eye(cmdp.n_states) - cmdp.gamma * _next_state_operator(pi, cmdp)
    return np.linalg.solve(A, r_pi)


def solve_mdp(cmdp: TabularCMDP, r_sa: np.ndarray, max_iter: int = 1000):
    """Policy iteration on the reward table ``r_sa``; returns ``(V, Q, greedy policy)``."""
    S, A = r_sa.shape
    actions = np.zeros(S, dtype=int)
    for _ in range(max_iter):
        pi = policy_matrix(actions, S, A)
        v = _evaluate_table(pi, cmdp, r_sa)
        q = r_sa + cmdp.gamma * cmdp.transitions @ v
        best = q.argmax(axis=1)
        # switch only on a strict improvement so the loop cannot cycle on ties
        improve = q[np.arange(S), best] > q[np.arange(S), actions] + 1e-12
        if not improve.any():
            return v, q, actions
        actions = np.where(improve, best, actions)
    raise RuntimeError("policy iteration did not converge")


def dp_successor_features(policy, cmdp: TabularCMDP, tol: float = 1e-12,
                          max_iter: int = 100_000) -> np.ndarray:
    """Iterate ``psi = E[phi] + gamma P_pi psi`` until the max-norm residual is below ``tol``."""
    if not cmdp.gamma < 1:
        raise ValueError("gamma must be < 1")
    pi = policy_matrix(policy, cmdp.n_states, cmdp.n_actions)
    base = cmdp.expected_features()
    P = cmdp.transitions
    psi = base.copy()
    for _ in range(max_iter):
        nxt = np.einsum("sap,pb,pbd->sad", P, pi, psi)
        new = base + cmdp.gamma * nxt
        resid = np.abs(new - psi).max()
        psi = new
        if resid <= tol:
            return psi
    raise RuntimeError(f"successor features did not converge to {tol}")


def lagrangian_dual_value(cmdp: TabularCMDP, lam: float) -> float:
    """``max_pi V_r + lam (V_c - tau)`` at the start state, by an exact MDP solve."""
    task = cmdp.task
    r_sa = cmdp.reward_table(task.reward_weights + lam * task.cost_weights)
    r_sa = r_sa - lam * (1.0 - task.gamma) * task.threshold
    return float(solve_mdp(cmdp, r_sa)[0][cmdp.start])


def solve_cmdp_exact(cmdp: TabularCMDP) -> ExactSolution:
    """Optimal constrained policy from the occupancy-measure LP.

    The multiplier is read from the dual value of the utility row. Occupancies
    are normalised to total mass ``1 / (1 - gamma)``.
    """
    S, A = cmdp.n_states, cmdp.n_actions
    task = cmdp.task
    gamma = task.gamma
    r = cmdp.reward_table(task.reward_weights).reshape(-1)
    c = cmdp.reward_table(task.cost_weights).reshape(-1)
    # flow: sum_a rho(s', a) - gamma sum_{s,a} P(s'|s,a) rho(s, a) = 1[s' = start]
    A_eq = np.repeat(np.eye(S), A, axis=1) - gamma * cmdp.transitions.reshape(S * A, S).T
    b_eq = np.zeros(S)
    b_eq[cmdp.start] = 1.0
    res = linprog(-r, A_ub=-c[None, :], b_ub=[-task.threshold], A_eq=A_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status == 2:
        return ExactSolution(feasible=False, status="infeasible")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    rho = np.clip(res.x, 0.0, None).reshape(S, A)
    mass = rho.sum(axis=1, keepdims=True)
    policy = np.where(mass > 0, rho / np.where(mass > 0, mass, 1.0), 1.0 / A)
    lam = max(0.0, -float(res.ineqlin.marginals[0]))
    v_r = exact_policy_evaluation(policy, cmdp, task.reward_weights)[cmdp.start]
    v_c = exact_policy_evaluation(policy, cmdp, task.cost_weights)[cmdp.start]
    return ExactSolution(True, policy, float(v_r), float(v_c), lam, rho, float(-res.fun), "optimal")


def dual_by_golden_section(cmdp: TabularCMDP, tol: float = 1e-10) -> tuple[float, float]:
    """Minimise the exact dual function over ``lam >= 0`` without LP duals.

    Returns ``(lam*, d(lam*))``. The bracket comes from the most feasible policy:
    ``lam* <= (d(0) - V_r(pi_bar)) / (V_c(pi_bar) - tau)``.
    """
    task = cmdp.task
    c_sa = cmdp.reward_table(task.cost_weights)
    _, _, safest = solve_mdp(cmdp, c_sa)
    v_c_bar = exact_policy_evaluation(safest, cmdp, task.cost_weights)[cmdp.start]
    slack = v_c_bar - task.threshold
    if slack < 0:
        raise ValueError("constraint is infeasible")
    v_r_bar = exact_policy_evaluation(safest, cmdp, task.reward_weights)[cmdp.start]
    d0 = lagrangian_dual_value(cmdp, 0.0)
    hi = (d0 - v_r_bar) / slack if slack > 1e-12 else 1e6
    lo, hi = 0.0, max(hi, 1e-9) * 1.01
    f = lambda x: lagrangian_dual_value(cmdp, x)
    ratio = (math.sqrt(5) - 1) / 2
    x1, x2 = hi - ratio * (hi - lo), lo + ratio * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - ratio * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + ratio * (hi - lo)
            f2 = f(x2)
    lam = 0.5 * (lo + hi)
    best = min((f(0.0), 0.0), (f(lam), lam))
    return best[1], best[0]


def phi_max(cmdp: TabularCMDP) -> float:
    return float(np.linalg.norm(cmdp.phi, axis=-1).max())


def gpi_bound(w_r_i, w_r_j, w_c_i, w_c_j, lam_i, lam_j, lam_tilde, eps, tau, gamma, phi_max) -> float:
    """Upper bound on the Lagrangian action-value gap of the transfer policy.

    ``w_r_i``, ``w_c_i`` and ``lam_i`` may describe several sources (one row
    each); the bound is the minimum over them.
    """
    if eps < 0 or not gamma < 1 or phi_max < 0 or lam_j < 0 or lam_tilde < 0:
        raise ValueError("invalid bound arguments")
    w_r_i = np.atleast_2d(np.asarray(w_r_i, dtype=np.float64))
    w_c_i = np.atleast_2d(np.asarray(w_c_i, dtype=np.float64))
    lam_i = np.atleast_1d(np.asarray(lam_i, dtype=np.float64))
    if np.any(lam_i < 0):
        raise ValueError("source multipliers must be nonnegative")
    w_r_j = np.asarray(w_r_j, dtype=np.float64)
    w_c_j = np.asarray(w_c_j, dtype=np.float64)
    reward_gap = np.linalg.norm(w_r_j[None, :] - w_r_i, axis=1)
    cost_gap = np.linalg.norm(lam_j * w_c_j[None, :] - lam_i[:, None] * w_c_i, axis=1)
    inner = (phi_max * reward_gap + phi_max * cost_gap + abs(lam_j - lam_tilde)
             + eps * (1.0 + lam_tilde))
    per_source = 2.0 / (1.0 - gamma) * inner + 2.0 * tau * np.abs(lam_j - lam_i)
    return float(per_source.min())


class TabularEnv:
    """Sampling interface over a :class:`TabularCMDP`, matching the gridworld's ``step``."""

    def __init__(self, cmdp: TabularCMDP):
        self.cmdp = cmdp
        self.n_actions = cmdp.n_actions
        self.feature_dim = cmdp.dim
        self.task = cmdp.task
        self._cum = np.cumsum(cmdp.transitions, axis=-1)
        self._w_r = cmdp.task.reward_weights
        self._w_c = cmdp.task.cost_weights

    def reset(self) -> int:
        return self.cmdp.start

    def step(self, state: int, action: int, rng: np.random.Generator) -> Transition:
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action!r}")
        cum = self._cum[state, action]
        nxt = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), cum.size - 1)
        phi = self.cmdp.phi[state, action, nxt]
        return Transition(state, action, nxt, float(phi @ self._w_r), float(phi @ self._w_c),
                          phi, False, ())


# ------------------------------------------------------------- serialization

def cmdp_to_dict(cmdp: TabularCMDP) -> dict:
    t = cmdp.task
    return {
        "format": "sftcop-cmdp",
        "version": 1,
        "n_states": cmdp.n_states,
        "n_actions": cmdp.n_actions,
        "start": cmdp.start,
        "transitions": cmdp.transitions.tolist(),
        "phi": cmdp.phi.tolist(),
        "task": {"reward_weights": t.reward_weights.tolist(), "cost_weights": t.cost_weights.tolist(),
                 "threshold": float(t.threshold), "gamma": float(t.gamma), "task_id": t.task_id},
    }


def cmdp_from_dict(doc: dict) -> TabularCMDP:
    if doc.get("format") != "sftcop-cmdp":
        raise ValueError("not a serialized CMDP document")
    t = doc["task"]
    task = TaskSpec(t["reward_weights"], t["cost_weights"], threshold=t["threshold"],
                    gamma=t["gamma"], task_id=t.get("task_id", 0))
    cmdp = TabularCMDP(np.array(doc["transitions"]), np.array(doc["phi"]), task, int(doc["start"]))
    if cmdp.n_states != doc["n_states"] or cmdp.n_actions != doc["n_actions"]:
        raise ValueError("declared sizes do not match the arrays")
    return cmdp


def save_cmdp(cmdp: TabularCMDP, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cmdp_to_dict(cmdp)))
    return path


def load_cmdp(path) -> TabularCMDP:
    return cmdp_from_dict(json.loads(Path(path).read_text()))
