import numpy as np
import pytest

from sftcop.core import PolicyEntry, TaskSpec, Transition
from sftcop.dual import DualConfig
from sftcop.gridworld import GridWorld, load_layout, sample_task
from sftcop.sf_learning import (EpisodeStreams, LearnerConfig, SuccessorLibrary, gpi_action,
                                load_library, save_library, sf_td_update, train_task,
                                weight_update)

LAYOUT = load_layout({"grid": ["S..0.",
                               ".T.#.",
                               "..1TG"], "object_classes": 2})


def small_cfg(**kw):
    base = dict(steps_per_task=1500, episode_horizon=60)
    base.update(kw)
    return LearnerConfig(**base)


def run_sequence(n_tasks, seed, cfg=None, fixed=None, tau=-5e-6):
    lib = SuccessorLibrary(4, LAYOUT.feature_dim)
    trng = np.random.default_rng([seed, 0])
    out = []
    for k in range(n_tasks):
        task = sample_task(trng, LAYOUT, threshold=tau, task_id=k)
        entry, recs = train_task(GridWorld(LAYOUT, task), task, lib, cfg or small_cfg(),
                                 DualConfig(), EpisodeStreams(seed, k), fixed_lambda=fixed,
                                 task_index=k)
        out.extend(recs)
    return lib, out


def test_sf_td_update_by_hand():
    psi = {0: np.zeros((2, 2)), 1: np.array([[1.0, 2.0], [3.0, 4.0]])}
    t = Transition(0, 1, 1, 0.0, 0.0, np.array([1.0, 0.0]), False)
    new = sf_td_update(psi, t, 0, alpha=0.5, gamma=0.9)
    np.testing.assert_allclose(new, 0.5 * (np.array([1.0, 0.0]) + 0.9 * np.array([1.0, 2.0])))
    np.testing.assert_allclose(psi[0][0], 0.0)
    done = t._replace(done=True)
    psi[0][1] = 0.0
    np.testing.assert_allclose(sf_td_update(psi, done, 0, 1.0, 0.9), [1.0, 0.0])
    with pytest.raises(ValueError):
        sf_td_update(psi, t._replace(phi=np.ones(3)), 0, 0.5, 0.9)


def test_weight_update_is_lms():
    w = np.zeros(2)
    weight_update(w, [1.0, 1.0], 2.0, 0.25)
    np.testing.assert_allclose(w, [0.5, 0.5])
    for _ in range(200):
        weight_update(w, [1.0, 0.0], 3.0, 0.5)
    assert w[0] == pytest.approx(3.0)


def test_gpi_action_envelope_and_ties():
    a = PolicyEntry({0: np.array([[1.0, 0.0], [0.0, 0.0]])}, 2, 2, 0.0, [1, 0], [0, 1])
    b = PolicyEntry({0: np.array([[0.0, 0.0], [2.0, -1.0]])}, 2, 2, 0.0, [1, 0], [0, 1])
    assert gpi_action(0, [a, b], np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.0) == 1
    # lam = 1 makes action 1 worth 1 under b and action 0 worth 1 under a: lowest index wins
    assert gpi_action(0, [a, b], np.array([1.0, 0.0]), np.array([0.0, 1.0]), 1.0) == 0


def test_library_rows_copy_and_mask():
    lib = SuccessorLibrary(2, 2)
    k = lib.begin_row(copy_previous=True)
    c = lib.cell("s")
    c[0][k, 1] = [1.0, 2.0]
    c[1][k, 1] = True
    lib.freeze(k, 0.0, [1, 0], [0, 1])
    k2 = lib.begin_row(copy_previous=True)
    blk, known, pen = lib.cell("s")
    np.testing.assert_array_equal(blk[k2], blk[0])
    assert known[k2].tolist() == [False, True]
    # the frozen row hides its unlearned action; the training row is open
    assert pen[0].tolist() == [-np.inf, 0.0]
    assert pen[k2].tolist() == [0.0, 0.0]
    with pytest.raises(RuntimeError):
        lib.begin_row(True)
    with pytest.raises(ValueError):
        lib.freeze(5, 0.0, [1, 0], [0, 1])


def test_library_noise_needs_rng():
    with pytest.raises(ValueError):
        SuccessorLibrary(2, 2, init_noise=0.1)
    lib = SuccessorLibrary(2, 2, init_noise=0.1, rng=np.random.default_rng(0))
    lib.begin_row(False)
    assert np.abs(lib.block("x")).max() <= 0.1


def test_training_is_deterministic():
    _, a = run_sequence(3, seed=4)
    _, b = run_sequence(3, seed=4)
    assert [r.as_row() for r in a] == [r.as_row() for r in b]
    _, c = run_sequence(3, seed=5)
    assert [r.as_row() for r in a] != [r.as_row() for r in c]


def test_records_account_every_step():
    lib, recs = run_sequence(2, seed=0)
    for k in range(2):
        task_recs = [r for r in recs if r.task == k]
        assert task_recs[-1].step == 1500
        assert [r.episode for r in task_recs] == list(range(len(task_recs)))
        assert all(r.failures >= 0 for r in task_recs)
    assert len(lib.entries) == 2
    assert lib.entries[1].metadata["steps"] == 1500


def test_fixed_multiplier_is_recorded_and_never_estimated():
    _, recs = run_sequence(2, seed=1, fixed=0.0)
    assert all(r.lam == 0.0 for r in recs)
    _, recs = run_sequence(2, seed=1, fixed=1.0)
    assert all(r.lam == 1.0 for r in recs)


def test_zero_multiplier_ignores_threshold():
    # with the multiplier pinned the threshold cannot matter
    _, a = run_sequence(2, seed=2, fixed=0.0, tau=-5e-6)
    _, b = run_sequence(2, seed=2, fixed=0.0, tau=-3.0)
    assert [r.as_row() for r in a] == [r.as_row() for r in b]


def test_loose_threshold_keeps_multiplier_at_zero():
    # every policy has V_c >= -0.1 / (1 - gamma) > -3, so the constraint never binds
    _, recs = run_sequence(2, seed=3, tau=-3.0)
    assert all(r.lam == 0.0 for r in recs)
    _, fixed = run_sequence(2, seed=3, fixed=0.0)
    assert [r.as_row() for r in recs] == [r.as_row() for r in fixed]


def test_episode_start_mode_and_period():
    _, recs = run_sequence(2, seed=0, cfg=small_cfg(dual_at="episode_start"))
    assert recs
    _, recs = run_sequence(2, seed=0, cfg=small_cfg(dual_update_period=25))
    assert recs
    with pytest.raises(ValueError):
        LearnerConfig(dual_at="sometimes")
    with pytest.raises(ValueError):
        LearnerConfig(alpha_sf=0.0)


def test_requires_rng():
    task = sample_task(np.random.default_rng(0), LAYOUT)
    with pytest.raises(ValueError):
        train_task(GridWorld(LAYOUT, task), task, SuccessorLibrary(4, LAYOUT.feature_dim))


def test_checkpoint_round_trip(tmp_path):
    lib, _ = run_sequence(2, seed=6)
    back = load_library(save_library(lib, tmp_path / "lib.npz"))
    assert len(back.entries) == 2
    for s in lib.states():
        for i in range(2):
            np.testing.assert_array_equal(back.entries[i].sf(s), lib.entries[i].sf(s))
        np.testing.assert_array_equal(back.cell(s)[2], lib.cell(s)[2])
    for a, b in zip(back.entries, lib.entries):
        np.testing.assert_array_equal(a.learned_reward_weights, b.learned_reward_weights)
        assert a.training_dual == b.training_dual and a.metadata == b.metadata
    # training continues identically from the checkpoint
    trng = np.random.default_rng(9)
    task = sample_task(trng, LAYOUT, task_id=2)
    _, r1 = train_task(GridWorld(LAYOUT, task), task, lib, small_cfg(), DualConfig(),
                       EpisodeStreams(6, 2), task_index=2)
    _, r2 = train_task(GridWorld(LAYOUT, task), task, back, small_cfg(), DualConfig(),
                       EpisodeStreams(6, 2), task_index=2)
    assert [r.as_row() for r in r1] == [r.as_row() for r in r2]


def test_learned_weights_recover_task_weights():
    # after a task the regression weights match the true weights on every feature the agent saw
    lib, recs = run_sequence(1, seed=7, cfg=small_cfg(steps_per_task=5000), fixed=0.0)
    task = sample_task(np.random.default_rng([7, 0]), LAYOUT, task_id=0)
    e = lib.entries[0]
    seen = e.learned_reward_weights != 0
    np.testing.assert_allclose(e.learned_reward_weights[seen], task.reward_weights[seen], atol=1e-6)


def test_episode_streams():
    a, b = EpisodeStreams(1, 2)(3), EpisodeStreams(1, 2)(3)
    assert a.random() == b.random()
    assert EpisodeStreams(1, 2)(3).random() != EpisodeStreams(1, 2)(4).random()
