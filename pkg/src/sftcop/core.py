"""Value types and the small amount of linear algebra every other module shares.

Successor features turn action-values into inner products: for any linear
reward ``r = phi . w`` the action-value of a policy is ``psi(s, a) . w``.
The constrained setting adds a second weight vector for the utility signal
and a scalar multiplier that trades the two off.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Hashable, Mapping, NamedTuple

import numpy as np

FeatureVector = np.ndarray


def feature_vector(values, dim: int | None = None) -> FeatureVector:
    """Validate and freeze a 1-d float64 feature or weight vector."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector entries must be finite")
    arr.flags.writeable = False
    return arr


def _finite(*xs: float) -> None:
    for x in xs:
        if not math.isfinite(x):
            raise ValueError(f"non-finite input: {x!r}")


@dataclass(frozen=True)
class TaskSpec:
    """Reward and utility weights of one task, plus its threshold and discount."""

    reward_weights: FeatureVector
    cost_weights: FeatureVector
    threshold: float
    gamma: float
    task_id: Hashable = 0

    def __post_init__(self):
        w_r = feature_vector(self.reward_weights)
        w_c = feature_vector(self.cost_weights, dim=w_r.shape[0])
        object.__setattr__(self, "reward_weights", w_r)
        object.__setattr__(self, "cost_weights", w_c)
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        _finite(float(self.threshold))

    @property
    def dim(self) -> int:
        return self.reward_weights.shape[0]


@dataclass(frozen=True)
class CombinedQParams:
    lam: float
    tau: float

    def __post_init__(self):
        _finite(self.lam, self.tau)
        if self.lam < 0:
            raise ValueError(f"multiplier must be nonnegative, got {self.lam}")


@dataclass(frozen=True)
class PolicyEntry:
    """One source policy: its successor-feature table and what it was trained with.

    ``psi`` maps a state to an ``(n_actions, dim)`` array. States missing from
    the mapping were never visited while training and read as zeros.
    """

    psi: Mapping[Any, np.ndarray]
    n_actions: int
    dim: int
    training_dual: float
    learned_reward_weights: FeatureVector
    learned_cost_weights: FeatureVector
    source_task_id: Hashable = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.training_dual >= 0 and math.isfinite(self.training_dual)):
            raise ValueError(f"training dual must be finite and >= 0, got {self.training_dual}")
        object.__setattr__(self, "learned_reward_weights",
                           feature_vector(self.learned_reward_weights, self.dim))
        object.__setattr__(self, "learned_cost_weights",
                           feature_vector(self.learned_cost_weights, self.dim))

    def sf(self, state) -> np.ndarray:
        row = self.psi.get(state)
        if row is None:
            return np.zeros((self.n_actions, self.dim))
        return row

    def own_weights(self) -> np.ndarray:
        """Weights defining this policy's greedy action on its own task."""
        return self.learned_reward_weights + self.training_dual * self.learned_cost_weights

    def greedy_action(self, state) -> int:
        return int(np.argmax(self.sf(state) @ self.own_weights()))


class Transition(NamedTuple):
    """One environment step. ``reward`` and ``cost`` are ``phi`` dotted with the task weights."""

    state: Any
    action: int
    next_state: Any
    reward: float
    cost: float
    phi: FeatureVector
    done: bool
    events: tuple = ()


@dataclass
class MetricsRecord:
    """Per-episode counters written to the metrics CSV."""

    task: int
    episode: int
    step: int
    failures: int
    total_reward: float
    safe_reward: float
    unsafe_reward: float
    v_c_hat: float
    lam: float

    CSV_HEADER = ("task", "episode", "step", "failures", "total_reward",
                  "safe_reward", "unsafe_reward", "v_c_hat", "lambda")

    def as_row(self) -> list[str]:
        return [str(self.task), str(self.episode), str(self.step), str(self.failures),
                repr(float(self.total_reward)), repr(float(self.safe_reward)),
                repr(float(self.unsafe_reward)), repr(float(self.v_c_hat)),
                repr(float(self.lam))]


def evaluate_q(psi_row, w) -> float | np.ndarray:
    """Inner product of successor features with a weight vector.

    ``psi_row`` may be a single ``(d,)`` row or an ``(n_actions, d)`` block, in
    which case one value per action is returned.
    """
    psi_row = np.asarray(psi_row, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if psi_row.shape[-1] != w.shape[-1] or w.ndim != 1:
        raise ValueError(f"dimension mismatch: psi {psi_row.shape} vs w {w.shape}")
    out = psi_row @ w
    return float(out) if out.ndim == 0 else out


def combined_q(q_r: float, q_c: float, params: CombinedQParams) -> float:
    _finite(q_r, q_c)
    return q_r + params.lam * (q_c - params.tau)


def lagrangian_reward(r: float, c: float, lam: float, tau: float, gamma: float) -> float:
    """Single reward whose discounted return equals the Lagrangian of a policy."""
    _finite(r, c, lam, tau, gamma)
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    return r + lam * (c - (1.0 - gamma) * tau)
