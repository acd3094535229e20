#!/usr/bin/env python3
"""Scripted baselines that bracket achievable returns on the default arena.

All policies except `privileged` use only information the learned policy also
receives: the masked relative observation, the agent's own action history, and
randomness. They calibrate the learning-milestone threshold:

* random:     uniform over available actions (floor).
* chase:      tag when available, else step toward the nearest visible active
              target, else take a uniform random move.
* memory:     chase, plus a dead-reckoned memory of each target's last seen
              position (aged out after 12 steps).
* memory+momentum: memory, plus persistent-heading search instead of a random
              walk when no target is known.
* privileged: chase on the unmasked state (upper bound; not information-fair).
"""

import argparse

import numpy as np

from entitymarl import arena
from entitymarl.arena import ArenaConfig, N_SELF_ACTIONS, TAG_RANGE, _MOVES
from entitymarl.numerics import Rng

MEMORY_HORIZON = 12


class ScriptedAgent:
    def __init__(self, cfg: ArenaConfig, index: int, mode: str, rng: Rng):
        self.cfg = cfg
        self.i = index
        self.mode = mode
        self.mem = {}  # target row -> [relative cells, age]
        self.heading = 1 + int(rng.integers(0, 4))

    def _update_memory(self, obs) -> None:
        cfg = self.cfg
        for j in range(cfg.n_targets):
            row = cfg.n_agents + j
            if obs.mask[row]:
                if obs.rows[row, 4] > 0:
                    self.mem[row] = [obs.rows[row, :2] * cfg.grid_size, 0]
                else:
                    self.mem.pop(row, None)
            elif row in self.mem and np.hypot(*self.mem[row][0]) <= cfg.sight_radius - 0.5:
                self.mem.pop(row)  # estimate says visible, it is not: stale

    def _search_move(self, state, rng: Rng) -> int:
        if self.mode != "memory+momentum":
            return 1 + int(rng.integers(0, 4))
        pos = state.pos[self.i]
        for _ in range(4):
            nxt = np.clip(pos + _MOVES[self.heading], 0, self.cfg.grid_size - 1)
            if np.array_equal(nxt, pos) or rng.random() < 0.1:
                self.heading = 1 + int(rng.integers(0, 4))
            else:
                break
        return self.heading

    def act(self, state, rng: Rng) -> int:
        cfg = self.cfg
        avail = arena.action_availability(state, self.i)
        if self.mode == "random":
            idx = np.flatnonzero(avail)
            return int(idx[rng.integers(0, idx.size)])
        if self.mode == "privileged":
            rel = arena.relativize(state, self.i)
            mask = np.ones(cfg.n_entities)
        else:
            obs = arena.observe(state, self.i)
            self._update_memory(obs)
            rel, mask = obs.rows, obs.mask
        # positions in rel are normalized by grid_size; work in cell units
        action, best, best_d = None, None, np.inf
        for j in range(cfg.n_targets):
            row = cfg.n_agents + j
            if mask[row] and rel[row, 4] > 0:
                d = float(np.hypot(*rel[row, :2])) * cfg.grid_size
                if avail[N_SELF_ACTIONS + j] and d <= TAG_RANGE + 1e-9:
                    action = N_SELF_ACTIONS + j  # tag only when it can land
                    break
                if d < best_d:
                    best, best_d = rel[row, :2] * cfg.grid_size, d
        if action is None and best is None and self.mode in ("memory", "memory+momentum"):
            for row, (est, age) in list(self.mem.items()):
                if age > MEMORY_HORIZON:
                    self.mem.pop(row)
                    continue
                d = float(np.hypot(*est))
                if d < best_d:
                    best, best_d = est, d
        if action is None:
            if best is None:
                action = self._search_move(state, rng)
            else:
                action = 1 + int(np.argmax(_MOVES[1:] @ best))
        # dead-reckon: own displacement shifts all relative estimates
        pos = state.pos[self.i]
        move = _MOVES[action] if action < N_SELF_ACTIONS else _MOVES[0]
        moved = np.clip(pos + move, 0, cfg.grid_size - 1) - pos
        for row in self.mem:
            self.mem[row][0] = self.mem[row][0] - moved
            self.mem[row][1] += 1
        return action


def rollout(mode: str, cfg: ArenaConfig, episodes: int, seed: int) -> np.ndarray:
    rng = Rng(seed, 0)
    returns = []
    for ep in range(episodes):
        env_rng = rng.spawn(2 * ep)
        act_rng = rng.spawn(2 * ep + 1)
        state, _ = arena.reset(cfg, env_rng)
        agents = [ScriptedAgent(cfg, i, mode, act_rng) for i in range(cfg.n_agents)]
        total, done = 0.0, False
        while not done:
            actions = [ag.act(state, act_rng) for ag in agents]
            state, _, reward, done = arena.step(state, actions, env_rng)
            total += reward
        returns.append(total)
    return np.asarray(returns)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ArenaConfig()
    for mode in ("random", "chase", "memory", "memory+momentum", "privileged"):
        r = rollout(mode, cfg, args.episodes, args.seed)
        se = r.std(ddof=1) / np.sqrt(len(r))
        print(f"{mode}: mean return {r.mean():.3f} +/- {1.96 * se:.3f} (95% CI)")


if __name__ == "__main__":
    main()
