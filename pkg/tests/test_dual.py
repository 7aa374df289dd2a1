import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sftcop.core import PolicyEntry
from sftcop.dual import (DualConfig, DualDivergenceError, InfeasibleDualError, PolicyValues,
                         analytic_dual_min, consistency_experiment, dual_function,
                         dual_update_step, estimate_dual, estimate_values, rollout_returns,
                         step_schedule)
from sftcop.oracle import TabularEnv, exact_policy_evaluation, random_cmdp


def reference_estimate(values, tau, cfg):
    """Plain transcription of the alternating update, one iteration at a time."""
    v_r = values.v_r.tolist()
    m = (values.v_c - tau).tolist()
    g = m if cfg.subgradient == "constraint" else [v - tau for v in v_r]
    lam = 0.0
    for t in range(1, cfg.iterations + 1):
        vals = [v_r[i] + lam * m[i] for i in range(len(v_r))]
        i = vals.index(max(vals))
        lam -= cfg.schedule_constant / t * g[i]
        if lam < 0:
            lam = 0.0
        elif lam > cfg.lambda_cap:
            raise DualDivergenceError(lam, t, cfg.lambda_cap)
    return lam


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=12), finite,
       st.sampled_from([1, 7, 500, 2000]), st.sampled_from([1.0, 1000.0]),
       st.sampled_from(["constraint", "printed"]))
def test_estimate_matches_reference_bit_for_bit(pairs, tau, T, c, rule):
    values = PolicyValues.from_pairs(pairs)
    cfg = DualConfig(iterations=T, schedule_constant=c, subgradient=rule, lambda_cap=1e6)
    try:
        want = reference_estimate(values, tau, cfg)
    except DualDivergenceError as exc:
        with pytest.raises(DualDivergenceError) as got:
            estimate_dual(values, tau, cfg)
        assert got.value.lam == exc.lam and got.value.iteration == exc.iteration
        return
    assert estimate_dual(values, tau, cfg) == want


def test_tiny_margins_like_the_gridworld():
    # feasible margins of order 1e-6 next to clearly infeasible ones
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 17))
        v_r = rng.uniform(-1, 3, n)
        v_c = np.where(rng.random(n) < 0.5, 0.0, -rng.uniform(0.01, 0.3, n))
        values = PolicyValues(v_r, v_c)
        cfg = DualConfig()
        try:
            want = reference_estimate(values, -5e-6, cfg)
        except DualDivergenceError:
            with pytest.raises(DualDivergenceError):
                estimate_dual(values, -5e-6, cfg)
            continue
        assert estimate_dual(values, -5e-6, cfg) == want


def test_two_policy_example():
    # lines 1 - lam and 0.5 + lam: the envelope minimum is at lam = 0.25
    values = PolicyValues([1.0, 0.5], [-1.0, 1.0])
    lam, d = analytic_dual_min(values, 0.0)
    assert lam == pytest.approx(0.25) and d == pytest.approx(0.75)
    est = estimate_dual(values, 0.0, DualConfig(iterations=100_000, schedule_constant=1.0))
    assert est == pytest.approx(0.25, abs=1e-4)


def test_feasible_best_policy_gives_zero():
    values = PolicyValues([2.0, 1.0], [0.5, -3.0])
    assert estimate_dual(values, 0.0) == 0.0
    assert analytic_dual_min(values, 0.0)[0] == 0.0


def test_infeasible_dual():
    values = PolicyValues([1.0, 2.0], [-1.0, -2.0])
    with pytest.raises(InfeasibleDualError):
        analytic_dual_min(values, 0.0)
    with pytest.raises(DualDivergenceError):
        estimate_dual(values, 0.0, DualConfig(iterations=100_000, lambda_cap=1e3))


def test_dual_function_grid_and_scalar():
    values = PolicyValues([1.0, 0.5], [-1.0, 1.0])
    np.testing.assert_allclose(dual_function(values, 0.0, [0.0, 0.25, 1.0]), [1.0, 0.75, 1.5])
    assert dual_function(values, 0.0, 0.25) == pytest.approx(0.75)


def test_update_step_and_schedule():
    values = PolicyValues([1.0, 0.5], [-1.0, 1.0])
    i, lam = dual_update_step(0.0, values, 0.0, 0.5)
    assert (i, lam) == (0, 0.5)
    i, lam = dual_update_step(1.0, values, 0.0, 0.5)
    assert (i, lam) == (1, 0.5)
    assert step_schedule(4, 1000.0) == 250.0
    with pytest.raises(ValueError):
        step_schedule(0, 1.0)
    with pytest.raises(ValueError):
        dual_update_step(-1.0, values, 0.0, 0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        DualConfig(iterations=0)
    with pytest.raises(ValueError):
        DualConfig(subgradient="other")
    with pytest.raises(ValueError):
        DualConfig(estimation_mode="guess")
    with pytest.raises(ValueError):
        PolicyValues([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        PolicyValues([], [])


def test_rollout_returns_match_exact_values():
    # [DERIVED] Monte-Carlo average vs linear-system value, within 5 standard errors
    rng = np.random.default_rng(2)
    cmdp = random_cmdp(rng, 5, 2, gamma=0.7)
    pol = rng.integers(2, size=5)
    env = TabularEnv(cmdp)
    g_r, g_c = rollout_returns(lambda s: int(pol[s]), env, 0, cmdp.task.reward_weights,
                               cmdp.task.cost_weights, 0.7, 4000, 80, np.random.default_rng(0))
    v_r = exact_policy_evaluation(pol, cmdp, cmdp.task.reward_weights)[0]
    v_c = exact_policy_evaluation(pol, cmdp, cmdp.task.cost_weights)[0]
    assert abs(g_r.mean() - v_r) < 5 * g_r.std() / np.sqrt(4000) + 1e-9
    assert abs(g_c.mean() - v_c) < 5 * g_c.std() / np.sqrt(4000) + 1e-9


def test_estimate_values_sf_mode():
    psi = {0: np.array([[1.0, 0.0], [0.0, 2.0]])}
    e = PolicyEntry(psi, 2, 2, 0.0, [0.0, 1.0], [0.0, 0.0])
    assert estimate_values(e, [1.0, 0.0], [0.0, 3.0], 0) == (0.0, 6.0)
    with pytest.raises(ValueError):
        estimate_values(e, [1.0, 0.0], [0.0, 3.0], 0, DualConfig(estimation_mode="monte_carlo"))


def test_consistency_experiment_rows(tmp_path):
    rng = np.random.default_rng(4)
    cmdp = random_cmdp(rng, 4, 2, gamma=0.6)
    pols = [rng.integers(2, size=4) for _ in range(3)]
    res = consistency_experiment(cmdp, pols, 0, [5, 50], [0, 1], horizon=40)
    assert [(r[0], r[1]) for r in res.rows] == [(5, 0), (5, 1), (50, 0), (50, 1)]
    assert all(r[3] == res.lambda_star for r in res.rows)
    path = res.write_csv(tmp_path / "c.csv")
    assert path.read_text().splitlines()[0] == "K,seed,lambda_hat,lambda_star,abs_error"
    again = consistency_experiment(cmdp, pols, 0, [5, 50], [0, 1], horizon=40)
    assert again.rows == res.rows
