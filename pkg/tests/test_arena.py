"""Arena: mask identity, availability, reward/termination contracts."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entitymarl import arena
from entitymarl.arena import (
    FEAT_DIM,
    N_SELF_ACTIONS,
    TAG_RANGE,
    ArenaConfig,
    ConfigurationError,
    ContractViolation,
)
from entitymarl.numerics import Rng


def random_rollout(cfg: ArenaConfig, seed: int):
    """Yield (state, obs, actions, reward, done) under a uniform-random policy."""
    rng = Rng(seed)
    state, obs = arena.reset(cfg, rng)
    done = False
    while not done:
        actions = []
        for i in range(cfg.n_agents):
            avail = arena.action_availability(state, i)
            choices = np.flatnonzero(avail)
            actions.append(int(choices[rng.integers(0, len(choices))]))
        prev = state
        state, obs, reward, done = arena.step(state, actions, rng)
        yield prev, obs, actions, reward, done


class TestConfig:
    def test_defaults(self):
        cfg = ArenaConfig()
        assert (cfg.n_agents, cfg.n_targets, cfg.grid_size) == (3, 3, 10)
        assert cfg.sight_radius == 3.0 and cfg.episode_limit == 50
        assert cfg.tag_reward == 1.0 and cfg.step_penalty == -0.01

    def test_sight_beyond_diagonal_rejected(self):
        with pytest.raises(ConfigurationError):
            ArenaConfig(grid_size=4, sight_radius=10.0)

    def test_too_many_entities_rejected(self):
        with pytest.raises(ConfigurationError):
            arena.reset(ArenaConfig(n_agents=5, n_targets=5, grid_size=3), Rng(0))


class TestReset:
    def test_distinct_cells_and_active(self):
        cfg = ArenaConfig()
        state, obs = arena.reset(cfg, Rng(0))
        cells = {tuple(p) for p in state.pos}
        assert len(cells) == cfg.n_entities
        assert state.active.sum() == cfg.n_entities
        assert len(obs) == cfg.n_agents

    def test_full_sight_sees_everything(self):
        cfg = ArenaConfig(sight_radius=10 * math.sqrt(2))
        _, obs = arena.reset(cfg, Rng(1))
        for o in obs:
            assert o.mask.sum() == cfg.n_entities

    def test_zero_sight_sees_only_self(self):
        cfg = ArenaConfig(sight_radius=0.0)
        state, obs = arena.reset(cfg, Rng(2))
        for i, o in enumerate(obs):
            # entities sharing the agent's cell stay visible at distance 0,
            # but reset places everyone on distinct cells
            assert o.mask.sum() == 1.0 and o.mask[i] == 1.0

    def test_same_seed_identical_layout(self):
        cfg = ArenaConfig()
        s1, _ = arena.reset(cfg, Rng(3))
        s2, _ = arena.reset(cfg, Rng(3))
        assert np.array_equal(s1.pos, s2.pos)
        assert np.array_equal(s1.rows, s2.rows)


class TestObserve:
    def test_self_always_visible_at_origin(self):
        state, obs = arena.reset(ArenaConfig(), Rng(4))
        for i, o in enumerate(obs):
            assert o.mask[i] == 1.0
            assert np.array_equal(o.rows[i, 0:2], [0.0, 0.0])

    def test_mask_identity_exact(self):
        # Eq-style identity: obs rows == mask * relativized state, bitwise
        for seed in range(50):
            cfg = ArenaConfig()
            state, _ = arena.reset(cfg, Rng(seed))
            for i in range(cfg.n_agents):
                o = arena.observe(state, i)
                expected = o.mask[:, None] * arena.relativize(state, i)
                assert np.array_equal(o.rows, expected)

    def test_brute_force_distance_oracle(self):
        for seed in range(200):
            cfg = ArenaConfig(sight_radius=2.5)
            state, _ = arena.reset(cfg, Rng(seed))
            for i in range(cfg.n_agents):
                o = arena.observe(state, i)
                for j in range(cfg.n_entities):
                    dx = state.pos[j] - state.pos[i]
                    visible = j == i or math.hypot(dx[0], dx[1]) <= 2.5
                    assert o.mask[j] == float(visible)

    def test_invisible_rows_zeroed(self):
        cfg = ArenaConfig(sight_radius=1.0)
        state, _ = arena.reset(cfg, Rng(7))
        o = arena.observe(state, 0)
        for j in range(cfg.n_entities):
            if o.mask[j] == 0.0:
                assert np.all(o.rows[j] == 0.0)

    def test_out_of_range_agent_rejected(self):
        state, _ = arena.reset(ArenaConfig(), Rng(0))
        with pytest.raises(ContractViolation):
            arena.observe(state, 3)


class TestAvailability:
    def test_self_actions_always_available(self):
        state, _ = arena.reset(ArenaConfig(), Rng(8))
        for i in range(3):
            assert arena.action_availability(state, i)[:N_SELF_ACTIONS].all()

    def test_tag_implies_visible_and_active(self):
        for seed in range(100):
            cfg = ArenaConfig()
            state, _ = arena.reset(cfg, Rng(seed))
            for i in range(cfg.n_agents):
                avail = arena.action_availability(state, i)
                mask = arena.visibility_mask(state, i, cfg.sight_radius)
                for j in range(cfg.n_targets):
                    row = cfg.n_agents + j
                    if avail[N_SELF_ACTIONS + j]:
                        assert mask[row] == 1.0 and state.active[row] == 1.0

    def test_all_targets_inactive_only_self_actions(self):
        cfg = ArenaConfig()
        state, _ = arena.reset(cfg, Rng(9))
        state.active[cfg.n_agents:] = 0.0
        avail = arena.action_availability(state, 0)
        assert list(avail) == [True] * 5 + [False] * 3


class TestStep:
    def test_no_event_step_reward_is_penalty(self):
        cfg = ArenaConfig(sight_radius=0.0, target_move_prob=0.0)
        state, _ = arena.reset(cfg, Rng(10))
        _, _, reward, _ = arena.step(state, [0, 0, 0], Rng(0))
        assert reward == cfg.step_penalty

    def test_adjacent_tag_deactivates_and_rewards(self):
        cfg = ArenaConfig(sight_radius=5.0, target_move_prob=0.0)
        state, _ = arena.reset(cfg, Rng(11))
        state.pos[0] = state.pos[cfg.n_agents] + [1, 0]  # adjacent to target 0
        state.rows = arena._build_rows(cfg, state.pos, state.active, state.last_action)
        new_state, _, reward, _ = arena.step(state, [N_SELF_ACTIONS, 0, 0], Rng(0))
        assert new_state.active[cfg.n_agents] == 0.0
        assert reward == cfg.tag_reward + cfg.step_penalty

    def test_tag_out_of_range_no_reward(self):
        cfg = ArenaConfig(sight_radius=8.0, target_move_prob=0.0)
        state, _ = arena.reset(cfg, Rng(12))
        state.pos[0] = state.pos[cfg.n_agents] + [3, 0]  # visible but too far
        state.rows = arena._build_rows(cfg, state.pos, state.active, state.last_action)
        new_state, _, reward, _ = arena.step(state, [N_SELF_ACTIONS, 0, 0], Rng(0))
        assert new_state.active[cfg.n_agents] == 1.0
        assert reward == cfg.step_penalty

    def test_terminates_at_episode_limit(self):
        cfg = ArenaConfig(sight_radius=0.0, episode_limit=5, target_move_prob=0.0)
        state, _ = arena.reset(cfg, Rng(13))
        done = False
        for _ in range(5):
            assert not done
            state, _, _, done = arena.step(state, [0, 0, 0], Rng(1))
        assert done and state.step_count == 5

    def test_unavailable_action_rejected(self):
        cfg = ArenaConfig(sight_radius=0.0)
        state, _ = arena.reset(cfg, Rng(14))
        with pytest.raises(ContractViolation):
            arena.step(state, [N_SELF_ACTIONS, 0, 0], Rng(0))

    def test_movement_clipped_at_boundary(self):
        cfg = ArenaConfig(target_move_prob=0.0)
        state, _ = arena.reset(cfg, Rng(15))
        state.pos[0] = [0, 0]
        state.rows = arena._build_rows(cfg, state.pos, state.active, state.last_action)
        new_state, _, _, _ = arena.step(state, [2, 0, 0], Rng(0))  # move down at edge
        assert list(new_state.pos[0]) == [0, 0]

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_random_episode_invariants(self, seed):
        cfg = ArenaConfig(episode_limit=30)
        total = 0.0
        steps = 0
        for state, obs, actions, reward, done in random_rollout(cfg, seed):
            total += reward
            steps += 1
            # shared-reward Dec-POMDP: m constant, masks well-formed
            assert state.rows.shape == (cfg.n_entities, FEAT_DIM)
            for o in obs:
                assert set(np.unique(o.mask)) <= {0.0, 1.0}
        assert steps <= cfg.episode_limit
        lo = cfg.step_penalty * cfg.episode_limit
        hi = cfg.n_targets * cfg.tag_reward
        assert lo - 1e-9 <= total <= hi + 1e-9

    def test_tag_range_constant(self):
        assert TAG_RANGE == 1.5
