"""Trainer: parallel episode rollouts, GAE, and per-minibatch updates.

Each update round collects one episode per rollout worker under a frozen
parameter snapshot, then runs sequential per-minibatch updates of three loss
groups: the clipped-surrogate actor loss, the Huber value-regression critic
loss, and the VAE + masked-inference reconstruction losses. Every stochastic
draw an actor forward consumed during rollout is stored and replayed verbatim,
so recomputed log-probabilities equal the behavior policy's exactly at the
first epoch.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import arena as arena_mod
from .arena import ArenaConfig, EntityState
from .latent import vae_loss
from .maskinfer import RecurrentState
from .numerics import ParameterStore, Rng, StateError, adam_step
from .policy import (
    ModelConfig,
    build_policy_params,
    critic_value,
    draw_noises,
    mae_sequence,
    policy_forward,
    policy_forward_sequence,
)

CHECKPOINT_VERSION = 1

NOISE_KEYS = ("eps_obs", "eps_int", "eps_state", "eps_rows", "eps_skill", "gumbel")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    value_loss_coef: float = 1.0
    recon_loss_coef: float = 1.0
    entropy_coef: float = 0.01
    huber_delta: float = 10.0
    max_grad_norm: float = 10.0
    kl_weight: float = 0.0
    minibatches: int = 1
    rollout_workers: int = 24
    epochs_per_update: int = 10
    total_env_steps: int = 2_000_000
    eval_interval: int = 8         # update rounds between evaluations
    eval_episodes: int = 32
    checkpoint_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.minibatches < 1 or self.rollout_workers < 1 or self.epochs_per_update < 1:
            raise ValueError("minibatches, rollout_workers, epochs_per_update must be >= 1")


@dataclass
class Trajectory:
    """One worker episode: everything the update phase replays."""

    obs: np.ndarray          # [T, n, m, F]
    masks: np.ndarray        # [T, n, m]
    states: np.ndarray       # [T, m, F]
    avail: np.ndarray        # [T, n, A] bool
    h_actor: np.ndarray      # [T, n, H] hidden state entering each step
    h_critic: np.ndarray     # [T, n, H] (critic is feedforward; kept for the record)
    skills: np.ndarray       # [T, n, K]
    actions: np.ndarray      # [T, n] int
    log_probs: np.ndarray    # [T, n]
    rewards: np.ndarray      # [T]
    dones: np.ndarray        # [T] bool
    values: np.ndarray       # [T] denormalized value estimates
    recon: np.ndarray        # [T, n]
    noises: Dict[str, np.ndarray]

    @property
    def length(self) -> int:
        return self.rewards.shape[0]

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


class ValueNorm:
    """Running mean/std of return targets (debiased exponential average)."""

    def __init__(self, beta: float = 0.995):
        self.beta = beta
        self.mean = 0.0
        self.mean_sq = 0.0
        self.debias = 0.0

    def update(self, x: np.ndarray) -> None:
        b = self.beta
        self.mean = b * self.mean + (1.0 - b) * float(np.mean(x))
        self.mean_sq = b * self.mean_sq + (1.0 - b) * float(np.mean(x * x))
        self.debias = b * self.debias + (1.0 - b)

    def _stats(self) -> Tuple[float, float]:
        if self.debias == 0.0:
            return 0.0, 1.0
        mean = self.mean / self.debias
        var = max(self.mean_sq / self.debias - mean * mean, 1e-8)
        return mean, math.sqrt(var)

    def normalize(self, x):
        mean, std = self._stats()
        return (x - mean) / std

    def denormalize(self, x):
        mean, std = self._stats()
        return x * std + mean

    def state(self) -> Dict[str, float]:
        return {"beta": self.beta, "mean": self.mean, "mean_sq": self.mean_sq, "debias": self.debias}

    @staticmethod
    def from_state(s: Dict[str, float]) -> "ValueNorm":
        vn = ValueNorm(s["beta"])
        vn.mean, vn.mean_sq, vn.debias = s["mean"], s["mean_sq"], s["debias"]
        return vn


def _t(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x)).to(torch.float64)


class _Recorder:
    def __init__(self):
        self.data: Dict[str, list] = {}

    def add(self, **kv) -> None:
        for k, v in kv.items():
            self.data.setdefault(k, []).append(v)

    def stacked(self, key: str) -> np.ndarray:
        return np.stack(self.data[key], axis=0)


def collect_rollouts(
    params: ParameterStore,
    arena_cfg: ArenaConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rng: Rng,
    round_idx: int = 0,
    value_norm: Optional[ValueNorm] = None,
    n_workers: Optional[int] = None,
) -> List[Trajectory]:
    """Run one episode per worker under the current (frozen) parameters.

    Workers own independent counter-based streams derived from (seed, round,
    worker), so results are reproducible and independent of scheduling.
    """
    W = n_workers if n_workers is not None else train_cfg.rollout_workers
    n, m, A = arena_cfg.n_agents, arena_cfg.n_entities, arena_cfg.n_actions
    H = model_cfg.hidden_dim
    base = 10_000 * (round_idx + 1)
    env_rngs = [rng.spawn(base + 3 * w) for w in range(W)]
    noise_rngs = [rng.spawn(base + 3 * w + 1) for w in range(W)]
    act_rngs = [rng.spawn(base + 3 * w + 2) for w in range(W)]

    states: List[EntityState] = []
    obs_rows = np.zeros((W, n, m, model_cfg.feat_dim))
    obs_mask = np.zeros((W, n, m))
    for w in range(W):
        s, obs = arena_mod.reset(arena_cfg, env_rngs[w])
        states.append(s)
        for i in range(n):
            obs_rows[w, i] = obs[i].rows
            obs_mask[w, i] = obs[i].mask
    hidden = torch.zeros(W, n, H, dtype=torch.float64)
    recorders = [_Recorder() for _ in range(W)]
    trajectories: List[Optional[Trajectory]] = [None] * W
    active = list(range(W))
    self_idx_t = torch.arange(n, dtype=torch.long)
    target_rows = torch.arange(arena_cfg.n_agents, m, dtype=torch.long)

    while active:
        Wa = len(active)
        batch_obs = _t(obs_rows[active])
        batch_mask = _t(obs_mask[active])
        batch_states = _t(np.stack([states[w].rows for w in active]))
        avail_np = np.stack(
            [[arena_mod.action_availability(states[w], i) for i in range(n)] for w in active]
        )
        batch_avail = torch.from_numpy(avail_np)
        noises_per_w = [draw_noises(model_cfg, (n,), m, noise_rngs[w]) for w in active]
        noises = {k: torch.stack([nw[k] for nw in noises_per_w]) for k in NOISE_KEYS}
        with torch.no_grad():
            out = policy_forward(
                batch_obs, batch_mask,
                batch_states.unsqueeze(1).expand(Wa, n, m, model_cfg.feat_dim),
                batch_avail, hidden[active],
                self_idx_t.unsqueeze(0).expand(Wa, n), target_rows,
                params, model_cfg, noises,
            )
            values = critic_value(batch_states, params, model_cfg).numpy()
        if value_norm is not None:
            values = value_norm.denormalize(values)
        log_probs = out["log_probs"].numpy()
        next_active = []
        new_hidden = hidden.clone()
        for bi, w in enumerate(active):
            probs = np.exp(log_probs[bi])
            actions = np.empty(n, dtype=np.int64)
            for i in range(n):
                c = np.cumsum(probs[i])
                actions[i] = int(np.searchsorted(c, act_rngs[w].random() * c[-1]))
            prev_state = states[w]
            new_state, obs, reward, done = arena_mod.step(prev_state, actions, env_rngs[w])
            rec = recorders[w]
            rec.add(
                obs=obs_rows[w].copy(),
                masks=obs_mask[w].copy(),
                states=prev_state.rows.copy(),
                avail=avail_np[bi],
                h_actor=hidden[w].numpy().copy(),
                skills=out["skill"][bi].numpy(),
                actions=actions,
                log_probs=np.take_along_axis(log_probs[bi], actions[:, None], axis=1)[:, 0],
                rewards=reward,
                dones=done,
                values=float(values[bi]),
                recon=out["recon"][bi].numpy(),
                **{f"noise_{k}": noises_per_w[bi][k].numpy() for k in NOISE_KEYS},
            )
            states[w] = new_state
            for i in range(n):
                obs_rows[w, i] = obs[i].rows
                obs_mask[w, i] = obs[i].mask
            new_hidden[w] = out["h"][bi]
            if done:
                trajectories[w] = Trajectory(
                    obs=rec.stacked("obs"),
                    masks=rec.stacked("masks"),
                    states=rec.stacked("states"),
                    avail=rec.stacked("avail"),
                    h_actor=rec.stacked("h_actor"),
                    h_critic=np.zeros_like(rec.stacked("h_actor")),
                    skills=rec.stacked("skills"),
                    actions=rec.stacked("actions"),
                    log_probs=rec.stacked("log_probs"),
                    rewards=np.asarray(rec.data["rewards"]),
                    dones=np.asarray(rec.data["dones"]),
                    values=np.asarray(rec.data["values"]),
                    recon=rec.stacked("recon"),
                    noises={k: rec.stacked(f"noise_{k}") for k in NOISE_KEYS},
                )
            else:
                next_active.append(w)
        hidden = new_hidden
        active = next_active
    return [t for t in trajectories if t is not None]


def compute_advantages(
    traj: Trajectory, cfg: TrainConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """GAE(gamma, lambda) and return targets from recorded rewards/values."""
    T = traj.length
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        nonterminal = 0.0 if traj.dones[t] else 1.0
        next_value = traj.values[t + 1] if t + 1 < T else 0.0
        delta = traj.rewards[t] + cfg.gamma * next_value * nonterminal - traj.values[t]
        last = delta + cfg.gamma * cfg.gae_lambda * nonterminal * last
        adv[t] = last
    returns = adv + traj.values
    return adv, returns


def _pad_minibatch(
    batch: Sequence[Trajectory], adv: Sequence[np.ndarray], ret: Sequence[np.ndarray]
) -> Dict[str, torch.Tensor]:
    """Stack variable-length episodes into [T_max, B, ...] tensors.

    Padded steps get all-ones masks / all-available actions so the forward
    stays finite; they are excluded from every loss by `valid`.
    """
    T_max = max(tr.length for tr in batch)
    B = len(batch)

    def pad(arrs: List[np.ndarray], fill: float = 0.0) -> np.ndarray:
        shape = (T_max, B) + arrs[0].shape[1:]
        out = np.full(shape, fill, dtype=arrs[0].dtype)
        for b, a in enumerate(arrs):
            out[: a.shape[0], b] = a
        return out

    data = {
        "obs": _t(pad([tr.obs for tr in batch])),
        "masks": _t(pad([tr.masks for tr in batch], fill=1.0)),
        "states": _t(pad([tr.states for tr in batch])),
        "avail": torch.from_numpy(pad([tr.avail for tr in batch], fill=1.0).astype(bool)),
        "actions": torch.from_numpy(pad([tr.actions for tr in batch]).astype(np.int64)),
        "old_log_probs": _t(pad([tr.log_probs for tr in batch])),
        "old_values": _t(pad([np.asarray(tr.values) for tr in batch])),
        "adv": _t(pad([np.asarray(a) for a in adv])),
        "ret": _t(pad([np.asarray(r) for r in ret])),
        "valid": _t(pad([np.ones(tr.length) for tr in batch])),
    }
    for k in NOISE_KEYS:
        data[f"noise_{k}"] = _t(pad([tr.noises[k] for tr in batch]))
    return data


def _replay_log_probs(
    data: Dict[str, torch.Tensor],
    params: ParameterStore,
    model_cfg: ModelConfig,
    arena_cfg: ArenaConfig,
) -> Dict[str, torch.Tensor]:
    """Recompute per-step log-probs/entropy through the recurrent chain."""
    T, B = data["valid"].shape
    n, m = arena_cfg.n_agents, arena_cfg.n_entities
    self_idx = torch.arange(n, dtype=torch.long).expand(T, B, n)
    target_rows = torch.arange(n, m, dtype=torch.long)
    noises = {k: data[f"noise_{k}"] for k in NOISE_KEYS}
    out = policy_forward_sequence(
        data["obs"], data["masks"],
        data["states"].unsqueeze(2).expand(T, B, n, m, model_cfg.feat_dim),
        data["avail"], self_idx, target_rows, params, model_cfg, noises,
    )
    lp = out["log_probs"]
    p = torch.exp(lp)
    # clamp keeps the backward of p * log p finite at p = 0 (masked actions)
    entropy = -(p * torch.clamp(lp, min=-1e4)).sum(dim=-1)
    return {
        "log_probs": torch.gather(lp, -1, data["actions"].unsqueeze(-1)).squeeze(-1),
        "entropy": entropy,        # [T, B, n]
        "recon": out["recon"],     # [T, B, n]
    }


def _replay_recon(
    data: Dict[str, torch.Tensor],
    params: ParameterStore,
    model_cfg: ModelConfig,
    arena_cfg: ArenaConfig,
    rng: Rng,
) -> torch.Tensor:
    """Masked-inference reconstruction loss over the minibatch, fresh noise."""
    T, B = data["valid"].shape
    n, m = arena_cfg.n_agents, arena_cfg.n_entities
    D = model_cfg.latent_dim
    noises = {
        "eps_obs": rng.normal(T, B, n, D),
        "eps_int": rng.normal(T, B, n, D),
        "eps_state": rng.normal(T, B, n, D),
    }
    seq = mae_sequence(
        data["obs"], data["masks"],
        data["states"].unsqueeze(2).expand(T, B, n, m, model_cfg.feat_dim),
        params, model_cfg, noises,
    )
    recon = seq["recon"]  # [T, B, n]
    valid = data["valid"].unsqueeze(-1)
    return (recon * valid).sum() / (valid.sum() * n).clamp(min=1.0)


def _group_names(store: ParameterStore, model_cfg: ModelConfig) -> Dict[str, List[str]]:
    """Parameter subsets for the three sequential loss groups."""
    names = store.names()
    critic = [n for n in names if n.startswith(("attn_v.", "critic.", "vae_s.enc."))]
    vae = [n for n in names if n.startswith(("vae_o.", "vae_s.", "mae."))]
    actor = [
        n for n in names
        if n.startswith(("vae_o.", "mae.", "skill.", "attn_self.", "attn_skill.", "act."))
    ]
    if model_cfg.ablation == "no_decoder_reuse":
        actor += [n for n in names if n.startswith("aux_dec.")]
    return {"actor": actor, "critic": critic, "vae": vae}


def _with_grads(store: ParameterStore, names: Sequence[str]) -> List[str]:
    """Drop group members that did not participate in this loss (no grad);
    e.g. the critic reads only encoder means, ablations bypass the decoder."""
    return [n for n in names if store[n].grad is not None]


def _clip_grads(store: ParameterStore, names: Sequence[str], max_norm: float) -> float:
    total = store.grad_norm(names)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        with torch.no_grad():
            for n in names:
                g = store[n].grad
                if g is not None:
                    g.mul_(scale)
    return total


def update(
    params: ParameterStore,
    buffer: Sequence[Trajectory],
    arena_cfg: ArenaConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rng: Rng,
    value_norm: Optional[ValueNorm] = None,
) -> Dict[str, float]:
    """Sequential per-minibatch updates of actor, critic, and VAE/MAE losses."""
    if len(buffer) == 0:
        raise StateError("update: empty rollout buffer")
    if value_norm is None:
        value_norm = ValueNorm()
    adv_all, ret_all = zip(*(compute_advantages(tr, train_cfg) for tr in buffer))
    flat_adv = np.concatenate(adv_all)
    adv_mean, adv_std = float(flat_adv.mean()), float(flat_adv.std()) + 1e-8
    adv_all = [(a - adv_mean) / adv_std for a in adv_all]
    value_norm.update(np.concatenate(ret_all))

    groups = _group_names(params, model_cfg)
    n_mb = min(train_cfg.minibatches, len(buffer))
    metrics = {k: 0.0 for k in ("actor_loss", "critic_loss", "vae_loss", "recon_loss", "entropy", "ratio_max")}
    count = 0
    for epoch in range(train_cfg.epochs_per_update):
        order = rng.permutation(len(buffer))
        splits = np.array_split(order, n_mb)
        for mb in splits:
            if len(mb) == 0:
                continue
            batch = [buffer[i] for i in mb]
            data = _pad_minibatch(batch, [adv_all[i] for i in mb], [ret_all[i] for i in mb])
            valid = data["valid"]                      # [T, B]
            n_valid = valid.sum().clamp(min=1.0)
            n = arena_cfg.n_agents

            # --- actor: PPO clipped surrogate + entropy bonus -------------
            params.zero_grad()
            replay = _replay_log_probs(data, params, model_cfg, arena_cfg)
            ratio = torch.exp(replay["log_probs"] - data["old_log_probs"])
            adv = data["adv"].unsqueeze(-1)            # shared team advantage
            surr = torch.minimum(
                ratio * adv,
                torch.clamp(ratio, 1.0 - train_cfg.clip, 1.0 + train_cfg.clip) * adv,
            )
            vmask = valid.unsqueeze(-1)
            surr_mean = (surr * vmask).sum() / (n_valid * n)
            entropy = (replay["entropy"] * vmask).sum() / (n_valid * n)
            actor_loss = -surr_mean - train_cfg.entropy_coef * entropy
            actor_loss.backward()
            actor_names = _with_grads(params, groups["actor"])
            _clip_grads(params, actor_names, train_cfg.max_grad_norm)
            adam_step(params, train_cfg.lr, eps=1e-5, names=actor_names, group="actor")
            params.zero_grad()

            # --- critic: clipped Huber regression on normalized targets --
            v_norm = critic_value(data["states"], params, model_cfg)  # [T, B]
            old_v_norm = _t(value_norm.normalize(data["old_values"].numpy()))
            target = _t(value_norm.normalize(data["ret"].numpy()))
            v_clipped = old_v_norm + torch.clamp(
                v_norm - old_v_norm, -train_cfg.clip, train_cfg.clip
            )
            huber = torch.nn.functional.huber_loss
            loss_raw = huber(v_norm, target, delta=train_cfg.huber_delta, reduction="none")
            loss_clip = huber(v_clipped, target, delta=train_cfg.huber_delta, reduction="none")
            critic_loss = train_cfg.value_loss_coef * (
                (torch.maximum(loss_raw, loss_clip) * valid).sum() / n_valid
            )
            critic_loss.backward()
            critic_names = _with_grads(params, groups["critic"])
            _clip_grads(params, critic_names, train_cfg.max_grad_norm)
            adam_step(params, train_cfg.lr, eps=1e-5, names=critic_names, group="critic")
            params.zero_grad()

            # --- VAE + masked-inference reconstruction -------------------
            flat_valid = valid.reshape(-1) > 0
            obs_rows = data["obs"].reshape(valid.numel(), n, *data["obs"].shape[3:])[flat_valid]
            mask_rows = data["masks"].reshape(valid.numel(), n, -1)[flat_valid]
            state_rows = data["states"].reshape(valid.numel(), *data["states"].shape[2:])[flat_valid]
            state_rep = state_rows.unsqueeze(1).expand(-1, n, *state_rows.shape[1:])
            l_vae = vae_loss(
                obs_rows, mask_rows, state_rep, params, rng, kl_weight=train_cfg.kl_weight
            )
            l_recon = _replay_recon(data, params, model_cfg, arena_cfg, rng)
            vae_total = l_vae + train_cfg.recon_loss_coef * l_recon
            vae_total.backward()
            vae_names = _with_grads(params, groups["vae"])
            _clip_grads(params, vae_names, train_cfg.max_grad_norm)
            adam_step(params, train_cfg.lr, eps=1e-5, names=vae_names, group="vae")
            params.zero_grad()

            metrics["actor_loss"] += float(actor_loss.detach())
            metrics["critic_loss"] += float(critic_loss.detach())
            metrics["vae_loss"] += float(l_vae.detach())
            metrics["recon_loss"] += float(l_recon.detach())
            metrics["entropy"] += float(entropy.detach())
            metrics["ratio_max"] = max(metrics["ratio_max"], float((ratio * vmask).max().detach()))
            count += 1
    for k in ("actor_loss", "critic_loss", "vae_loss", "recon_loss", "entropy"):
        metrics[k] /= max(count, 1)
    metrics["mean_return"] = float(np.mean([tr.episode_return for tr in buffer]))
    return metrics


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    path: Path,
    params: ParameterStore,
    model_cfg: ModelConfig,
    value_norm: ValueNorm,
    env_steps: int,
    cfg_fingerprint: str = "",
) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": asdict(model_cfg),
        "value_norm": value_norm.state(),
        "env_steps": env_steps,
        "config_hash": cfg_fingerprint,
        "seed": params.rng_seed,
    }
    arrays = {f"param/{k}": v for k, v in params.state_dict().items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    return state, meta


def restore_model(path: Path, model_cfg: Optional[ModelConfig] = None) -> Tuple[ParameterStore, ModelConfig, ValueNorm, dict]:
    """Rebuild a parameter store from a checkpoint; fixed dims must match."""
    state, meta = load_checkpoint(path)
    ckpt_cfg = ModelConfig(**meta["model"])
    if model_cfg is not None:
        for dim in ("feat_dim", "latent_dim", "n_skills", "hidden_dim", "attn_dim", "n_heads"):
            if getattr(model_cfg, dim) != getattr(ckpt_cfg, dim):
                raise CheckpointError(
                    f"checkpoint {dim}={getattr(ckpt_cfg, dim)} incompatible with "
                    f"requested {dim}={getattr(model_cfg, dim)}"
                )
        ckpt_cfg = model_cfg
    store = ParameterStore(meta.get("seed", 0))
    build_policy_params(store, ckpt_cfg)
    store.load_state_dict(state)
    return store, ckpt_cfg, ValueNorm.from_state(meta["value_norm"]), meta


def evaluate(
    params: ParameterStore,
    model_cfg: ModelConfig,
    arena_cfg: ArenaConfig,
    episodes: int,
    seed: int = 12345,
    greedy: bool = False,
) -> Dict[str, object]:
    """Policy rollouts on an arbitrary arena config; returns return statistics
    and per-timestep reconstruction-loss means (history-effect diagnostics).

    Actions are sampled from the policy by default: entities outside the sight
    radius are invisible and positions are relative, so systematic search
    requires stochasticity and argmax rollouts understate the learned policy.
    Pass greedy=True for deterministic rollouts."""
    rng = Rng(seed, 777)
    returns, lengths = [], []
    recon_by_t: Dict[int, List[float]] = {}
    from .policy import act  # local import to avoid cycle at module load
    for ep in range(episodes):
        env_rng = rng.spawn(10 + 3 * ep)
        noise_rng = rng.spawn(11 + 3 * ep)
        state, obs = arena_mod.reset(arena_cfg, env_rng)
        hidden = [RecurrentState.initial(model_cfg.hidden_dim) for _ in range(arena_cfg.n_agents)]
        total, done, t = 0.0, False, 0
        while not done:
            actions = []
            for i in range(arena_cfg.n_agents):
                avail = arena_mod.action_availability(state, i)
                with torch.no_grad():
                    a, _, _, h_new, recon = act(
                        obs[i], state, hidden[i], avail, params, model_cfg, noise_rng,
                        greedy=greedy,
                    )
                hidden[i] = h_new
                actions.append(a)
                recon_by_t.setdefault(t, []).append(recon)
            state, obs, reward, done = arena_mod.step(state, actions, env_rng)
            total += reward
            t += 1
        returns.append(total)
        lengths.append(t)
    returns_np = np.asarray(returns)
    mean = float(returns_np.mean())
    std = float(returns_np.std(ddof=1)) if episodes > 1 else 0.0
    ci = 1.96 * std / math.sqrt(episodes) if episodes > 1 else 0.0
    recon_means = {t: float(np.mean(v)) for t, v in recon_by_t.items()}
    return {
        "mean_return": mean,
        "std_return": std,
        "ci95": ci,
        "episodes": episodes,
        "mean_length": float(np.mean(lengths)),
        "returns": returns,
        "recon_by_t": recon_means,
    }


def train(
    arena_cfg: ArenaConfig,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    warm_start: Optional[Path] = None,
    stop_return: Optional[float] = None,
    cfg_fingerprint: str = "",
    log_fn=None,
    time_budget_s: Optional[float] = None,
) -> Dict[str, object]:
    """Alternate rollout collection and updates until the step budget.

    Writes metrics.jsonl (one record per update) and periodic checkpoints
    under out_dir. `stop_return` ends training early once a periodic evaluation
    reaches that mean return; `time_budget_s` caps wall-clock time (the run
    simply stops with whatever it has learned).
    """
    torch.set_num_threads(1)  # bitwise reproducibility of reductions
    t_start = time.time()
    if warm_start is not None:
        params, model_cfg, value_norm, _ = restore_model(warm_start, model_cfg)
    else:
        params = ParameterStore(train_cfg.seed)
        build_policy_params(params, model_cfg)
        value_norm = ValueNorm()
    rng = Rng(train_cfg.seed, 1)
    update_rng = Rng(train_cfg.seed, 2)
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
    env_steps = 0
    round_idx = 0
    last_eval = None
    history: List[Dict[str, float]] = []
    try:
        while env_steps < train_cfg.total_env_steps:
            buffer = collect_rollouts(
                params, arena_cfg, model_cfg, train_cfg, rng, round_idx, value_norm
            )
            env_steps += sum(tr.length for tr in buffer)
            metrics = update(
                params, buffer, arena_cfg, model_cfg, train_cfg, update_rng, value_norm
            )
            metrics["env_steps"] = env_steps
            metrics["round"] = round_idx
            if train_cfg.eval_interval > 0 and round_idx % train_cfg.eval_interval == 0:
                ev = evaluate(
                    params, model_cfg, arena_cfg, train_cfg.eval_episodes,
                    seed=train_cfg.seed + 900_000,
                )
                metrics["eval_return"] = ev["mean_return"]
                last_eval = ev
            history.append(metrics)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(metrics, sort_keys=True) + "\n")
                metrics_fh.flush()
            if log_fn is not None:
                log_fn(metrics)
            if out_dir is not None and round_idx % train_cfg.checkpoint_interval == 0:
                save_checkpoint(
                    out_dir / "checkpoint.npz", params, model_cfg, value_norm,
                    env_steps, cfg_fingerprint,
                )
            if (
                stop_return is not None
                and "eval_return" in metrics
                and metrics["eval_return"] >= stop_return
            ):
                break
            if time_budget_s is not None and time.time() - t_start > time_budget_s:
                break
            round_idx += 1
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(
            out_dir / "checkpoint.npz", params, model_cfg, value_norm, env_steps, cfg_fingerprint
        )
    return {
        "params": params,
        "model_cfg": model_cfg,
        "value_norm": value_norm,
        "env_steps": env_steps,
        "history": history,
        "final_eval": last_eval,
    }
