"""Scripted reference policies: uniform-random and greedy-chase.

Used to calibrate learning milestones: random gives the floor, greedy-chase
(move toward the nearest visible target, tag when in range, patrol otherwise)
gives a strong scripted ceiling for the tag arena.
"""

from __future__ import annotations

import math
from typing import Dict, List

import numpy as np

from . import arena as arena_mod
from .arena import N_SELF_ACTIONS, TAG_RANGE, ArenaConfig
from .numerics import Rng

_DIRS = {(0, 1): 1, (0, -1): 2, (-1, 0): 3, (1, 0): 4}


def _toward(delta: np.ndarray) -> int:
    """Self-action index that most reduces distance along the larger axis."""
    dx, dy = int(delta[0]), int(delta[1])
    if abs(dx) >= abs(dy) and dx != 0:
        return 4 if dx > 0 else 3
    if dy != 0:
        return 1 if dy > 0 else 2
    return 0


def _stats(returns: List[float]) -> Dict[str, object]:
    arr = np.asarray(returns)
    n = len(returns)
    std = float(arr.std(ddof=1)) if n > 1 else 0.0
    return {
        "mean_return": float(arr.mean()),
        "std_return": std,
        "ci95": 1.96 * std / math.sqrt(n) if n > 1 else 0.0,
        "episodes": n,
        "returns": returns,
    }


def run_random_policy(arena_cfg: ArenaConfig, episodes: int, seed: int = 0) -> Dict[str, object]:
    """Monte-Carlo baseline: uniform over available actions each step."""
    rng = Rng(seed, 31)
    returns = []
    for ep in range(episodes):
        env_rng = rng.spawn(2 * ep)
        act_rng = rng.spawn(2 * ep + 1)
        state, _ = arena_mod.reset(arena_cfg, env_rng)
        total, done = 0.0, False
        while not done:
            actions = []
            for i in range(arena_cfg.n_agents):
                avail = np.flatnonzero(arena_mod.action_availability(state, i))
                actions.append(int(avail[act_rng.integers(0, len(avail))]))
            state, _, reward, done = arena_mod.step(state, actions, env_rng)
            total += reward
        returns.append(total)
    return _stats(returns)


def run_greedy_chase(arena_cfg: ArenaConfig, episodes: int, seed: int = 0) -> Dict[str, object]:
    """Scripted oracle: tag in range, else chase nearest visible target,
    else head for the last place a target was seen, else patrol."""
    rng = Rng(seed, 37)
    returns = []
    for ep in range(episodes):
        env_rng = rng.spawn(2 * ep)
        script_rng = rng.spawn(2 * ep + 1)
        state, _ = arena_mod.reset(arena_cfg, env_rng)
        n = arena_cfg.n_agents
        memory = [None] * n          # last seen active-target cell per agent
        heading = [1 + int(script_rng.integers(0, 4)) for _ in range(n)]
        total, done = 0.0, False
        while not done:
            actions = []
            for i in range(n):
                avail = arena_mod.action_availability(state, i)
                pos = state.pos[i]
                best_j, best_d = None, np.inf
                for j in range(arena_cfg.n_targets):
                    row = arena_cfg.n_agents + j
                    if avail[N_SELF_ACTIONS + j]:
                        d = float(np.linalg.norm(state.pos[row] - pos))
                        if d < best_d:
                            best_j, best_d = j, d
                if best_j is not None:
                    row = arena_cfg.n_agents + best_j
                    memory[i] = state.pos[row].copy()
                    if best_d <= TAG_RANGE:
                        actions.append(N_SELF_ACTIONS + best_j)
                        continue
                    actions.append(_toward(state.pos[row] - pos))
                    continue
                if memory[i] is not None and not np.array_equal(memory[i], pos):
                    actions.append(_toward(memory[i] - pos))
                    continue
                memory[i] = None
                # patrol: keep a heading, bounce off walls
                move = arena_mod._MOVES[heading[i]]
                nxt = pos + move
                if (nxt < 0).any() or (nxt >= arena_cfg.grid_size).any():
                    heading[i] = 1 + int(script_rng.integers(0, 4))
                actions.append(heading[i])
            state, _, reward, done = arena_mod.step(state, actions, env_rng)
            total += reward
        returns.append(total)
    return _stats(returns)
