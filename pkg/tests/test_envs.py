"""Unit tests for the toy environments and maze data generation."""

import numpy as np
import pytest

from bstlab.envs import (
    BUILTIN_LAYOUTS,
    EnvSpec,
    FourModeBandit,
    PointMaze,
    WaypointController,
    bfs_path,
    cell_center,
    generate_maze_dataset,
    is_connected,
    make_env,
    oracle_policy,
    parse_layout,
)
from bstlab.errors import ConfigError, StateError


def umaze():
    return make_env(EnvSpec(kind="point_maze", layout="umaze"))


class TestLayoutParsing:
    def test_builtins_parse_and_connect(self):
        for name, text in BUILTIN_LAYOUTS.items():
            grid = parse_layout(text)
            assert is_connected(grid), name
            assert grid.goal is not None
            assert len(grid.starts) >= 1

    def test_unequal_rows(self):
        with pytest.raises(ConfigError):
            parse_layout("###\n##")

    def test_goal_count_enforced(self):
        with pytest.raises(ConfigError, match="goal"):
            parse_layout("#S#\n#.#")
        with pytest.raises(ConfigError, match="goal"):
            parse_layout("GSG")

    def test_start_required(self):
        with pytest.raises(ConfigError, match="start"):
            parse_layout("G..")

    def test_invalid_character(self):
        with pytest.raises(ConfigError, match="invalid"):
            parse_layout("GS?")

    def test_umaze_shortest_path(self):
        grid = parse_layout(BUILTIN_LAYOUTS["umaze"])
        path = bfs_path(grid, grid.starts[0], grid.goal)
        assert len(path) == 7
        assert path[0] == grid.starts[0] and path[-1] == grid.goal

    def test_unreachable_returns_none(self):
        grid = parse_layout("G#S")
        assert bfs_path(grid, (0, 2), (0, 0)) is None
        assert not is_connected(grid)


class TestEnvSpec:
    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            EnvSpec(kind="cartpole")

    def test_bad_horizon(self):
        with pytest.raises(ConfigError):
            EnvSpec(horizon=0)

    def test_bad_scales(self):
        with pytest.raises(ConfigError):
            EnvSpec(step_scale=0.0)

    def test_inline_layout(self):
        env = make_env(EnvSpec(kind="point_maze", layout="###\n#S#\n#G#\n###"))
        assert isinstance(env, PointMaze)


class TestFourModeBandit:
    def test_reset_is_origin(self):
        env = FourModeBandit()
        np.testing.assert_array_equal(env.reset(np.random.default_rng(0)), [0.0, 0.0])

    def test_mode_center_rewards(self):
        env = FourModeBandit()
        for center, reward in zip(env.centers, env.rewards):
            _, r, done = env.step(np.zeros(2), center)
            assert r == reward and done

    def test_far_action_scores_zero(self):
        env = FourModeBandit()
        _, r, done = env.step(np.zeros(2), [0.0, 0.0])
        assert r == 0.0 and done

    def test_episodes_are_single_step(self):
        env = FourModeBandit()
        _, _, done = env.step(np.zeros(2), [0.9, 0.9])
        assert done


class TestPointMazeStep:
    def test_zero_action_keeps_state(self):
        env = umaze()
        s = cell_center((3, 2))
        s2, r, done = env.step(s, [0.0, 0.0])
        np.testing.assert_array_equal(s2, s)
        assert r == 0.0 and not done

    def test_free_motion(self):
        env = umaze()
        s = cell_center((3, 2))
        s2, _, _ = env.step(s, [1.0, 0.0])
        np.testing.assert_allclose(s2, s + [0.15, 0.0], atol=1e-12)

    def test_wall_stops_motion(self):
        env = umaze()
        s = np.array([1.05, 3.5])
        s2, _, _ = env.step(s, [-1.0, 0.0])
        # The wall face is at x = 1; the point stops on the face, backed
        # off a hair so it stays in the free cell.
        assert 1.0 <= s2[0] <= 1.0 + 1e-6
        assert s2[1] == 3.5
        assert not env.grid.is_wall(*env._cell_of(s2))

    def test_corner_blocks_diagonal(self):
        env = umaze()
        s = np.array([1.05, 3.05])
        s2, _, _ = env.step(s, [-1.0, -1.0])
        assert s2[0] >= 1.0 and s2[1] >= 3.0
        assert not env.grid.is_wall(*env._cell_of(s2))

    def test_goal_detection(self):
        env = umaze()
        s = np.array([1.6, 1.5])
        s2, r, done = env.step(s, [-0.5, 0.0])
        assert r == 1.0 and done
        assert env.in_goal(s2)

    def test_staying_inside_goal_terminates(self):
        env = umaze()
        s = env.goal_pos + np.array([0.1, 0.0])
        _, r, done = env.step(s, [0.0, 0.0])
        assert r == 1.0 and done

    def test_wall_state_rejected(self):
        env = umaze()
        with pytest.raises(StateError):
            env.step(np.array([0.5, 0.5]), [0.0, 0.0])

    def test_fuzz_never_penetrates_walls(self):
        # Long random walk; every visited position must sit in free space.
        env = umaze()
        rng = np.random.default_rng(123)
        s = env.reset(rng)
        for _ in range(100_000):
            a = rng.uniform(-1, 1, size=2)
            s, _, done = env.step(s, a)
            assert not env.grid.is_wall(*env._cell_of(s))
            if done:
                s = env.reset(rng)


class TestOracleAndController:
    def test_oracle_solves_umaze(self):
        env = umaze()
        s = env.reset(np.random.default_rng(0))
        policy = oracle_policy(env)
        done = False
        for _ in range(env.horizon):
            s, r, done = env.step(s, policy(s))
            if done:
                break
        assert done and r == 1.0

    def test_oracle_solves_large(self):
        env = make_env(EnvSpec(kind="point_maze", layout="large"))
        s = env.reset(np.random.default_rng(0))
        policy = oracle_policy(env)
        done = False
        for _ in range(env.horizon):
            s, r, done = env.step(s, policy(s))
            if done:
                break
        assert done

    def test_noiseless_waypoints_reach_goal(self):
        env = umaze()
        path = bfs_path(env.grid, env.grid.starts[0], env.grid.goal)
        controller = WaypointController(
            env, [cell_center(c) for c in path], 0.0, np.random.default_rng(0)
        )
        s = cell_center(env.grid.starts[0])
        done = False
        for _ in range(env.horizon):
            s, r, done = env.step(s, controller(s))
            if done:
                break
        assert done and r == 1.0


@pytest.fixture(scope="module")
def generated():
    spec = EnvSpec(kind="point_maze", layout="umaze")
    return generate_maze_dataset(spec, n_episodes=200, seed=7)


class TestMazeDataset:
    def test_success_fraction_low(self, generated):
        frac = generated.source_manifest["end_to_end_success_fraction"]
        assert frac <= 0.05

    def test_rewards_binary(self, generated):
        assert set(np.unique(generated.rewards)) <= {0.0, 1.0}

    def test_actions_boxed(self, generated):
        assert np.all(np.abs(generated.actions) <= 1.0)

    def test_boundaries_cover_dataset(self, generated):
        b = generated.episode_boundaries
        assert len(b) == 200
        assert int(b[-1]) == len(generated)

    def test_states_in_free_space(self, generated):
        env = umaze()
        for arr in (generated.states, generated.next_states):
            rows = np.floor(arr[:, 1]).astype(int)
            cols = np.floor(arr[:, 0]).astype(int)
            assert not env.grid.walls[rows, cols].any()

    def test_deterministic(self):
        spec = EnvSpec(kind="point_maze", layout="umaze")
        a = generate_maze_dataset(spec, n_episodes=20, seed=3)
        b = generate_maze_dataset(spec, n_episodes=20, seed=3)
        assert a == b

    def test_zero_episodes_rejected(self):
        with pytest.raises(ValueError):
            generate_maze_dataset(EnvSpec(kind="point_maze"), 0, seed=0)

    def test_bandit_spec_rejected(self):
        with pytest.raises(ConfigError):
            generate_maze_dataset(EnvSpec(kind="four_mode_bandit"), 5, seed=0)

    def test_disconnected_maze_rejected(self):
        spec = EnvSpec(kind="point_maze", layout="G#S")
        with pytest.raises(ConfigError, match="disconnected"):
            generate_maze_dataset(spec, 5, seed=0)
