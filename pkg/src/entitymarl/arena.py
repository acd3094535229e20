"""Entity-based partially observed tag arena.

A desk-scale Dec-POMDP: n agents chase p targets on a bounded 2-D grid.
Every entity contributes one fixed-width feature row; each agent sees only
entities within its sight radius, producing exactly the observation =
mask * relativized-state structure the latent modules exploit. Actions split
into self-movement and entity-directed tags, so the action space scales with
the entity count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import Rng

FEAT_DIM = 6  # x, y, is_agent, is_target, active, last_action_norm
N_SELF_ACTIONS = 5  # stay, up, down, left, right
_MOVES = np.array([[0, 0], [0, 1], [0, -1], [-1, 0], [1, 0]])
TAG_RANGE = 1.5  # tags reach orthogonally and diagonally adjacent cells


class ConfigurationError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class ArenaConfig:
    n_agents: int = 3
    n_targets: int = 3
    grid_size: int = 10
    sight_radius: float = 3.0
    episode_limit: int = 50
    tag_reward: float = 1.0
    step_penalty: float = -0.01
    target_move_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 1 or self.n_targets < 1:
            raise ConfigurationError("need at least one agent and one target")
        if self.n_agents + self.n_targets < 2:
            raise ConfigurationError("need at least two entities")
        if self.sight_radius < 0:
            raise ConfigurationError("sight_radius must be nonnegative")
        if self.sight_radius > self.grid_size * math.sqrt(2):
            raise ConfigurationError("sight_radius exceeds the grid diagonal")
        if self.episode_limit < 1 or self.grid_size < 1:
            raise ConfigurationError("episode_limit and grid_size must be positive")
        if not 0.0 <= self.target_move_prob <= 1.0:
            raise ConfigurationError("target_move_prob must be a probability")

    @property
    def n_entities(self) -> int:
        return self.n_agents + self.n_targets

    @property
    def n_actions(self) -> int:
        return N_SELF_ACTIONS + self.n_targets


@dataclass
class EntityState:
    """Global per-entity rows plus the discrete ground truth behind them."""

    rows: np.ndarray            # [m, F], positions normalized to [0, 1]
    pos: np.ndarray             # [m, 2] integer cells
    active: np.ndarray          # [m] {0,1}; agents always 1
    last_action: np.ndarray     # [m] int, -1 before any action
    step_count: int
    config: ArenaConfig


@dataclass
class EntityObservation:
    rows: np.ndarray            # [m, F], positions relative to the observer
    mask: np.ndarray            # [m] {0,1}
    self_index: int


def _build_rows(cfg: ArenaConfig, pos: np.ndarray, active: np.ndarray, last_action: np.ndarray) -> np.ndarray:
    m = cfg.n_entities
    rows = np.zeros((m, FEAT_DIM))
    rows[:, 0:2] = pos / cfg.grid_size
    rows[: cfg.n_agents, 2] = 1.0
    rows[cfg.n_agents :, 3] = 1.0
    rows[:, 4] = active
    norm = max(cfg.n_actions - 1, 1)
    acted = last_action >= 0
    rows[acted, 5] = last_action[acted] / norm
    return rows


def reset(config: ArenaConfig, rng: Rng) -> Tuple[EntityState, List[EntityObservation]]:
    """Place all entities on distinct cells uniformly at random."""
    m = config.n_entities
    n_cells = config.grid_size * config.grid_size
    if m > n_cells:
        raise ConfigurationError(f"{m} entities do not fit on a {config.grid_size}x{config.grid_size} grid")
    cells = rng.permutation(n_cells)[:m]
    pos = np.stack([cells % config.grid_size, cells // config.grid_size], axis=1)
    active = np.ones(m)
    last_action = np.full(m, -1, dtype=np.int64)
    state = EntityState(
        rows=_build_rows(config, pos, active, last_action),
        pos=pos,
        active=active,
        last_action=last_action,
        step_count=0,
        config=config,
    )
    obs = [observe(state, i, config.sight_radius) for i in range(config.n_agents)]
    return state, obs


def relativize(state: EntityState, agent: int) -> np.ndarray:
    """State rows with positions re-expressed relative to the observing agent."""
    rows = state.rows.copy()
    rows[:, 0:2] = (state.pos - state.pos[agent]) / state.config.grid_size
    return rows


def visibility_mask(state: EntityState, agent: int, sight_radius: float) -> np.ndarray:
    dist = np.linalg.norm(state.pos - state.pos[agent], axis=1)
    mask = (dist <= sight_radius).astype(float)
    mask[agent] = 1.0
    return mask


def observe(state: EntityState, agent: int, sight_radius: Optional[float] = None) -> EntityObservation:
    """Observation = visibility mask applied row-wise to the relativized state."""
    if agent >= state.config.n_agents:
        raise ContractViolation(f"agent index {agent} out of range")
    if sight_radius is None:
        sight_radius = state.config.sight_radius
    mask = visibility_mask(state, agent, sight_radius)
    rows = mask[:, None] * relativize(state, agent)
    return EntityObservation(rows=rows, mask=mask, self_index=agent)


def action_availability(state: EntityState, agent: int) -> np.ndarray:
    """Self-actions always available; tag(j) iff target j is active and visible."""
    cfg = state.config
    mask = visibility_mask(state, agent, cfg.sight_radius)
    avail = np.zeros(cfg.n_actions, dtype=bool)
    avail[:N_SELF_ACTIONS] = True
    for j in range(cfg.n_targets):
        row = cfg.n_agents + j
        avail[N_SELF_ACTIONS + j] = bool(state.active[row] > 0 and mask[row] > 0)
    return avail


def step(
    state: EntityState, actions: Sequence[int], rng: Rng
) -> Tuple[EntityState, List[EntityObservation], float, bool]:
    """Advance one step: agents move or tag, then active targets drift.

    A tag deactivates its target when the actor is within TAG_RANGE cells.
    Shared team reward = (#targets tagged this step) * tag_reward + step_penalty.
    """
    cfg = state.config
    if len(actions) != cfg.n_agents:
        raise ContractViolation(f"expected {cfg.n_agents} actions, got {len(actions)}")
    pos = state.pos.copy()
    active = state.active.copy()
    last_action = state.last_action.copy()
    tagged = set()
    for i, a in enumerate(actions):
        a = int(a)
        if not 0 <= a < cfg.n_actions:
            raise ContractViolation(f"action {a} out of range for agent {i}")
        avail = action_availability(state, i)
        if not avail[a]:
            raise ContractViolation(f"unavailable action {a} for agent {i}")
        last_action[i] = a
        if a < N_SELF_ACTIONS:
            pos[i] = np.clip(pos[i] + _MOVES[a], 0, cfg.grid_size - 1)
        else:
            row = cfg.n_agents + (a - N_SELF_ACTIONS)
            dist = float(np.linalg.norm(state.pos[row] - state.pos[i]))
            if active[row] > 0 and dist <= TAG_RANGE:
                tagged.add(row)
    for row in tagged:
        active[row] = 0.0
    # random drift of surviving targets
    for j in range(cfg.n_targets):
        row = cfg.n_agents + j
        if active[row] > 0 and rng.random() < cfg.target_move_prob:
            move = _MOVES[1 + int(rng.integers(0, 4))]
            pos[row] = np.clip(pos[row] + move, 0, cfg.grid_size - 1)
    reward = len(tagged) * cfg.tag_reward + cfg.step_penalty
    new_state = EntityState(
        rows=_build_rows(cfg, pos, active, last_action),
        pos=pos,
        active=active,
        last_action=last_action,
        step_count=state.step_count + 1,
        config=cfg,
    )
    targets_left = new_state.active[cfg.n_agents :].sum() > 0
    done = (not targets_left) or new_state.step_count >= cfg.episode_limit
    obs = [observe(new_state, i, cfg.sight_radius) for i in range(cfg.n_agents)]
    return new_state, obs, reward, done


def dump_trace_step(
    fh: IO[str],
    state: EntityState,
    observations: Sequence[EntityObservation],
    actions: Sequence[int],
    reward: float,
) -> None:
    """Append one step to a JSON-lines episode trace."""
    record = {
        "step": state.step_count,
        "state_rows": state.rows.tolist(),
        "masks": [o.mask.tolist() for o in observations],
        "actions": [int(a) for a in actions],
        "reward": float(reward),
    }
    fh.write(json.dumps(record) + "\n")
