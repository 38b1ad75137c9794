import numpy as np
import pytest

from taskspan.envs import (
    GOAL_SLICE,
    ONEHOT_OFFSET,
    PHYS_SLICE,
    PointEnv,
    SUCCESS_BONUS,
    REWARD_BOUND,
    TaskSpec,
    build_suite,
    obs_dim_for,
    reference_action,
    run_reference_episode,
    suite_from_config,
)
from taskspan.errors import ConfigError


def tri():
    return build_suite("tri-task", "random", seed=0)


# ---------------------------------------------------------------------------
# reset


def test_reset_is_deterministic_under_seed():
    specs, onehot = tri()
    env = PointEnv(specs[1], onehot, seed=0)
    a = env.reset(seed=42)
    b = env.reset(seed=42)
    assert a.tobytes() == b.tobytes()


def test_fixed_goal_is_point_mass():
    specs, onehot = build_suite("tri-task", "fixed", seed=7)
    for spec in specs:
        assert spec.fixed_goal
        env = PointEnv(spec, onehot, seed=0)
        goals = {tuple(env.reset(seed=i)[GOAL_SLICE]) for i in range(5)}
        assert len(goals) == 1
        assert goals.pop() == tuple(spec.goal_low)


def test_goal_sampler_mean_matches_monte_carlo():
    specs, onehot = tri()
    spec = specs[0]
    env = PointEnv(spec, onehot, seed=3)
    draws = np.array([env.reset()[GOAL_SLICE] for _ in range(10_000)])
    lo = np.asarray(spec.goal_low)
    hi = np.asarray(spec.goal_high)
    se = (hi - lo) / np.sqrt(12.0) / np.sqrt(10_000)
    assert np.all(np.abs(draws.mean(axis=0) - spec.goal_mean()) < 3 * se)


# ---------------------------------------------------------------------------
# step


def test_zero_action_from_rest_keeps_agent_still():
    specs, onehot = tri()
    env = PointEnv(specs[0], onehot, seed=1)
    obs = env.reset(seed=5)
    pos = obs[0:2].copy()
    static_dist = np.linalg.norm(pos - obs[GOAL_SLICE])
    nxt, reward, done, info = env.step(np.zeros(2))
    assert np.array_equal(nxt[0:2], pos)
    assert reward == pytest.approx(-static_dist)


def test_success_predicate_pays_bonus():
    specs, onehot = tri()
    env = PointEnv(specs[0], onehot, seed=2)
    env.reset(seed=9)
    env.agent = env.goal.copy()  # teleport onto the goal
    env.vel = np.zeros(2)
    _, reward, _, info = env.step(np.zeros(2))
    assert info["success"]
    assert reward >= SUCCESS_BONUS


def test_horizon_is_150_steps():
    specs, onehot = tri()
    env = PointEnv(specs[0], onehot, seed=3)
    env.reset(seed=1)
    for t in range(1, 151):
        _, _, done, info = env.step(np.zeros(2))
        assert done == (t == 150)
    assert info["truncated"]


def test_out_of_range_action_clamped_and_counted():
    specs, onehot = tri()
    env = PointEnv(specs[0], onehot, seed=4)
    env.reset(seed=1)
    before = env.clamp_count
    env.step(np.array([2.0, -3.0]))
    assert env.clamp_count == before + 1
    env.step(np.array([0.5, 0.5]))
    assert env.clamp_count == before + 1


def test_reward_bounded_per_step():
    specs, onehot = tri()
    rng = np.random.default_rng(11)
    for spec in specs:
        env = PointEnv(spec, onehot, seed=5)
        env.reset(seed=2)
        done = False
        while not done:
            _, reward, done, _ = env.step(rng.uniform(-1, 1, 2))
            assert -REWARD_BOUND <= reward <= SUCCESS_BONUS


def test_trajectory_fully_determined_by_seed_and_actions():
    specs, onehot = tri()
    actions = np.random.default_rng(6).uniform(-1, 1, (40, 2))

    def rollout():
        env = PointEnv(specs[2], onehot, seed=0)
        obs = [env.reset(seed=77)]
        for a in actions:
            nxt, *_ = env.step(a)
            obs.append(nxt)
        return np.concatenate(obs).tobytes()

    assert rollout() == rollout()


def test_slot_wall_blocks_object_outside_gap():
    specs, onehot = tri()
    spec = specs[2]
    env = PointEnv(spec, onehot, seed=8)
    env.reset(seed=3)
    # park the attached pair right before the wall, far from the gap
    env.agent = np.array([spec.wall_x - 0.02, 0.8])
    env.obj = np.array([spec.wall_x - 0.02, 0.75])
    env.vel = np.zeros(2)
    for _ in range(30):
        env.step(np.array([1.0, 0.0]))
    assert env.obj[0] < spec.wall_x
    assert env.agent[0] < spec.wall_x


def test_slot_gap_lets_aligned_pair_through():
    specs, onehot = tri()
    spec = specs[2]
    env = PointEnv(spec, onehot, seed=8)
    env.reset(seed=3)
    env.agent = np.array([spec.wall_x - 0.05, spec.gap_y])
    env.obj = np.array([spec.wall_x - 0.10, spec.gap_y])
    env.vel = np.zeros(2)
    for _ in range(40):
        env.step(np.array([1.0, 0.0]))
    assert env.obj[0] > spec.wall_x


# ---------------------------------------------------------------------------
# observation layout


def test_observation_layout_contract():
    specs, onehot = tri()
    assert onehot == 4  # one spare slot for transfer tasks
    for spec in specs:
        env = PointEnv(spec, onehot, seed=9)
        obs = env.reset(seed=4)
        assert obs.shape == (obs_dim_for(onehot),)
        assert np.array_equal(obs[PHYS_SLICE],
                              np.concatenate([env.agent, env.vel, env.obj]))
        assert np.array_equal(obs[GOAL_SLICE], env.goal)
        hot = obs[ONEHOT_OFFSET:]
        assert hot.sum() == 1.0
        assert hot[spec.skill_index] == 1.0


# ---------------------------------------------------------------------------
# suites


def test_tri_suite_skill_indices():
    specs, _ = tri()
    assert [s.skill_index for s in specs] == [0, 1, 2]
    assert [s.name for s in specs] == ["reach", "push", "slot"]


def test_deca_suite_has_ten_distinct_skills():
    specs, onehot = build_suite("deca-task", "random", seed=0)
    assert len(specs) == 10
    assert onehot == 10
    assert len({s.skill_index for s in specs}) == 10
    families = {s.family for s in specs}
    assert families == {"reach", "push", "slot", "toggle"}


def test_fixed_mode_all_point_masses():
    specs, _ = build_suite("deca-task", "fixed", seed=1)
    assert all(s.fixed_goal for s in specs)


def test_random_mode_seed_sensitivity():
    specs, onehot = tri()
    env_a = PointEnv(specs[0], onehot, seed=1)
    env_b = PointEnv(specs[0], onehot, seed=2)
    assert not np.array_equal(env_a.reset()[GOAL_SLICE], env_b.reset()[GOAL_SLICE])


def test_unknown_suite_name():
    with pytest.raises(ConfigError):
        build_suite("mega-task", "random", seed=0)


def test_suite_from_config_custom_skills():
    specs, onehot = suite_from_config({
        "onehot_size": 3,
        "skills": [
            {"name": "a", "family": "reach", "goal_low": [0, 0], "goal_high": [0.5, 0.5]},
            {"name": "b", "family": "push", "goal_low": [0.2, 0], "goal_high": [0.7, 0.5],
             "success_radius": 0.2},
        ],
    })
    assert onehot == 3
    assert specs[1].success_radius == 0.2


def test_suite_from_config_missing_field():
    with pytest.raises(ConfigError, match="family"):
        suite_from_config({"skills": [{"goal_low": [0, 0], "goal_high": [1, 1]}]})


# ---------------------------------------------------------------------------
# reference controllers validate solvability


@pytest.mark.parametrize("suite_name", ["tri-task", "deca-task"])
def test_reference_controller_solves_every_skill(suite_name):
    specs, onehot = build_suite(suite_name, "random", seed=0)
    for spec in specs:
        env = PointEnv(spec, onehot, seed=123)
        wins = sum(run_reference_episode(env, seed=1000 + i) for i in range(100))
        assert wins >= 95, f"{spec.name}: scripted controller only {wins}/100"


def test_toggle_requires_low_speed():
    specs, onehot = build_suite("deca-task", "random", seed=0)
    toggle = [s for s in specs if s.family == "toggle"][0]
    env = PointEnv(toggle, onehot, seed=10)
    env.reset(seed=6)
    env.agent = env.goal.copy()
    env.vel = np.array([0.5, 0.0])  # way above the speed limit
    _, _, _, info = env.step(np.zeros(2))
    assert not info["success"]
