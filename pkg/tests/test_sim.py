import numpy as np
import pytest

from herdcast.sim import (PolicyKind, WorldConfig, WorldState, flee_directions, run_trial,
                          select_target, simulate_batch, step_world)

CFG = WorldConfig()


def _state(herders, targets):
    return WorldState(0.0, herders, targets)


def test_world_config_validates():
    with pytest.raises(ValueError):
        WorldConfig(repulsion_radius=0.0)
    with pytest.raises(ValueError):
        WorldConfig(containment_radius=0.1, repulsion_radius=0.12)
    with pytest.raises(ValueError):
        WorldConfig(record_hz=0)
    assert CFG.containment_area == pytest.approx(np.pi * 0.09)
    assert CFG.dt == pytest.approx(0.02)


def test_policy_kind_validates():
    with pytest.raises(ValueError):
        PolicyKind("expert", period=0.0, epsilon=0.0, direction_sensitive=True, max_speed=1.0)
    with pytest.raises(ValueError):
        PolicyKind("novice", period=0.3, epsilon=1.5, direction_sensitive=False, max_speed=1.0)
    assert PolicyKind.named("novice") == PolicyKind.novice()


def test_target_outside_radius_moves_brownian_only():
    # herder 0.20 m away: same step as with the herder far away, given the same noise
    targets = [[0.5, 0.5], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]
    near = _state([[0.7, 0.5], [1.4, 1.4]], targets)
    far = _state([[1.4, -1.4], [1.4, 1.4]], targets)
    a = step_world(near, CFG, near.herder_pos, 0.02, np.random.default_rng(0))
    b = step_world(far, CFG, far.herder_pos, 0.02, np.random.default_rng(0))
    np.testing.assert_array_equal(a.target_pos, b.target_pos)


def test_flee_points_away_from_herder():
    s = _state([[0.45, 0.5], [1.4, 1.4]], [[0.5, 0.5], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    nxt = step_world(s, CFG, s.herder_pos, 0.02, np.random.default_rng(0))
    vel = nxt.target_vel[0]
    np.testing.assert_allclose(vel, [CFG.target_flee_speed, 0.0], atol=1e-12)


def test_two_herders_push_along_summed_direction():
    influenced, direction = flee_directions(np.array([[-0.05, 0.0], [0.0, -0.05]]),
                                            np.zeros((4, 2)) + [[0, 0], [1, 1], [1, -1], [-1, 1]], 0.12)
    assert influenced.tolist() == [True, False, False, False]
    np.testing.assert_allclose(direction[0], [np.sqrt(0.5), np.sqrt(0.5)])


def test_step_is_deterministic_and_rejects_bad_input():
    s = _state([[0, 0], [0.5, 0.5]], [[1, 1], [-1, 1], [1, -1], [-1, -1]])
    a = step_world(s, CFG, [[1, 0], [0, 1]], 0.02, np.random.default_rng(9))
    b = step_world(s, CFG, [[1, 0], [0, 1]], 0.02, np.random.default_rng(9))
    for x, y in [(a.herder_pos, b.herder_pos), (a.target_pos, b.target_pos)]:
        assert x.tobytes() == y.tobytes()
    with pytest.raises(ValueError):
        step_world(s, CFG, [[np.nan, 0], [0, 0]], 0.02, np.random.default_rng(0))
    with pytest.raises(ValueError):
        step_world(s, CFG, s.herder_pos, 0.0, np.random.default_rng(0))


def test_herder_speed_is_clipped():
    cfg = WorldConfig(herder_max_speed=(1.0, 1.0))
    s = _state([[0, 0], [0.5, 0.5]], [[1, 1], [-1, 1], [1, -1], [-1, -1]])
    nxt = step_world(s, cfg, [[1.0, 0.0], [0.5, 0.5]], 0.02, np.random.default_rng(0))
    np.testing.assert_allclose(nxt.herder_pos[0], [0.02, 0.0])
    np.testing.assert_allclose(nxt.herder_pos[1], [0.5, 0.5])


def test_all_contained_returns_zero_for_both_policies():
    s = _state([[1, 1], [-1, -1]], [[0.1, 0], [0, 0.1], [-0.1, 0], [0, -0.1]])
    for pol in (PolicyKind.expert(), PolicyKind.novice()):
        for focal in (0, 1):
            assert select_target(pol, s, focal, np.random.default_rng(0)) == 0


def test_expert_single_outside_target():
    s = _state([[0.9, 0.0], [-1.0, 0.0]], [[0.1, 0], [1.0, 0.1], [-0.1, 0], [0, -0.1]])
    assert select_target(PolicyKind.expert(), s, 0, np.random.default_rng(0)) == 2


def test_expert_picks_furthest_eligible_target():
    # targets 1 and 3 are closer to herder 0 than to herder 1, at 0.9 m and 0.7 m from the centre
    s = _state([[0.8, 0.0], [-1.4, 0.0]], [[0.9, 0.0], [0.0, 0.1], [0.0, 0.7], [0.05, 0.0]])
    assert select_target(PolicyKind.expert(), s, 0, np.random.default_rng(0)) == 1


def test_novice_nearest_with_lowest_index_tiebreak():
    pol = PolicyKind("novice", 0.3, 0.0, False, 0.8)
    s = _state([[0.0, 0.0], [1.4, 1.4]], [[0.5, 0.0], [0.0, 0.5], [-1.0, 0.0], [0.0, -1.0]])
    assert select_target(pol, s, 0, np.random.default_rng(0)) == 1


def test_novice_random_switch_picks_outside_target():
    pol = PolicyKind("novice", 0.3, 1.0, False, 0.8)
    s = _state([[0.0, 0.0], [1.4, 1.4]], [[0.5, 0.0], [0.0, 0.1], [-1.0, 0.0], [0.0, -1.0]])
    picks = {select_target(pol, s, 0, np.random.default_rng(i)) for i in range(60)}
    assert picks == {1, 3, 4}


def test_trial_starting_contained_is_one_frame():
    init = _state([[1, 1], [-1, -1]], [[0.1, 0], [0, 0.1], [-0.1, 0], [0, -0.1]])
    tr = run_trial(CFG, (PolicyKind.expert(), PolicyKind.expert()), seed=3, initial=init)
    assert tr.n_frames == 1 and tr.success and tr.duration == 0.0


def test_run_trial_is_pure():
    pols = (PolicyKind.novice(), PolicyKind.novice())
    a = run_trial(CFG, pols, seed=42)
    b = run_trial(CFG, pols, seed=42)
    assert a == b
    assert a.herders.tobytes() == b.herders.tobytes()


def test_trial_invariants(expert_trials, novice_trials):
    hw = CFG.field_half_width
    for tr in expert_trials + novice_trials:
        assert np.all(np.abs(tr.herders) <= hw) and np.all(np.abs(tr.targets) <= hw)
        inside = np.linalg.norm(tr.targets, axis=2) < CFG.containment_radius
        full = inside.all(axis=1)
        if tr.success:
            assert full[-1] and not full[:-1].any()
        step = np.linalg.norm(np.diff(tr.herders, axis=0), axis=2)
        speed = 1.2 if tr.expertise == "expert" else 0.8
        assert step.max() <= speed * CFG.dt + 1e-12
        tstep = np.linalg.norm(np.diff(tr.targets, axis=0), axis=2)
        bound = max(CFG.target_flee_speed * CFG.dt, 4 * CFG.target_brownian_sigma * np.sqrt(CFG.dt))
        assert tstep.max() <= bound + 1e-12
        assert set(np.unique(tr.labels)) <= {0, 1, 2, 3, 4}


def test_batch_independent_of_workers():
    a = simulate_batch("expert", 1, 3, seed=8, n_jobs=1)
    b = simulate_batch("expert", 1, 3, seed=8, n_jobs=3)
    assert a == b
    assert [t.trial_id for t in a] == ["expert-p00-t00", "expert-p00-t01", "expert-p00-t02"]


def test_experts_gather_faster(expert_trials, novice_trials):
    te = np.mean([t.duration for t in expert_trials])
    tn = np.mean([t.duration for t in novice_trials])
    assert te < tn
