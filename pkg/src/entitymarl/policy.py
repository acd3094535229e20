"""Skill assignment and the attentive action decoder, plus the centralized critic.

The actor pipeline per agent step: masked-entity inference -> Gumbel-Softmax
skill from the integrated belief -> enhanced observation (masked rows replaced
by decoded belief samples) -> multi-head self-attention over entity rows and
skill attention -> per-entity action logits over self-moves and entity tags.
Entity-wise logit heads keep the parameter count independent of the entity
count, so one parameter set serves arenas of any size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .numerics import (
    SIGMA_MAX,
    DiagonalGaussian,
    ParameterStore,
    Rng,
    gumbel_softmax,
    linear,
    softmax,
)
from . import latent
from .latent import build_vae_params, decode_obs, encode_state
from .maskinfer import (
    MaskedBelief,
    RecurrentState,
    build_maskinfer_params,
    integrate,
    mae_forward,
)
from .arena import FEAT_DIM, N_SELF_ACTIONS, EntityObservation, EntityState

ABLATIONS = ("full", "no_decoder_reuse", "no_masked_inference")
AUX_DECODER = "aux_dec"

NEG_INF = float("-inf")


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = FEAT_DIM
    latent_dim: int = 8
    hidden_dim: int = 64
    attn_dim: int = 64
    n_heads: int = 3
    n_skills: int = 4
    gumbel_temperature: float = 1.0
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def head_dim(self) -> int:
        return max(self.attn_dim // self.n_heads, 1)

    @property
    def inner_dim(self) -> int:
        return self.n_heads * self.head_dim


def build_policy_params(store: ParameterStore, cfg: ModelConfig) -> None:
    """Declare every trainable tensor of actor and critic in a fixed order."""
    F, D, H = cfg.feat_dim, cfg.latent_dim, cfg.hidden_dim
    d, inner, K = cfg.attn_dim, cfg.inner_dim, cfg.n_skills
    build_vae_params(store, latent.OBS_VAE, F, H, D)
    build_vae_params(store, latent.STATE_VAE, F, H, D)
    build_maskinfer_params(store, D, H)
    # spare decoder for the no_decoder_reuse ablation (same shape as the
    # observation decoder, trained by the actor loss only); declared always
    # so shared-seed runs of all variants start from identical streams
    store.add(f"{AUX_DECODER}.dec.w1", (H, D))
    store.add(f"{AUX_DECODER}.dec.b1", (H,), init="zeros")
    store.add(f"{AUX_DECODER}.dec.w2", (F, H), gain=0.01)
    store.add(f"{AUX_DECODER}.dec.b2", (F,), init="zeros")
    store.add("skill.head.w", (K, D), gain=0.01)
    store.add("skill.head.b", (K,), init="zeros")
    store.add("skill.mlp.w1", (H, K))
    store.add("skill.mlp.b1", (H,), init="zeros")
    store.add("skill.mlp.w2", (d, H))
    store.add("skill.mlp.b2", (d,), init="zeros")
    for p, q_in in (("attn_self", F), ("attn_skill", d)):
        store.add(f"{p}.wq", (inner, q_in))
        store.add(f"{p}.wk", (inner, F))
        store.add(f"{p}.wv", (inner, F))
        store.add(f"{p}.wo", (d, inner))
    store.add("act.self.w", (N_SELF_ACTIONS, 2 * d), gain=0.01)
    store.add("act.self.b", (N_SELF_ACTIONS,), init="zeros")
    store.add("act.out.w", (1, 2 * d), gain=0.01)
    store.add("act.out.b", (1,), init="zeros")
    store.add("attn_v.wq", (inner, D))
    store.add("attn_v.wk", (inner, D))
    store.add("attn_v.wv", (inner, D))
    store.add("attn_v.wo", (d, inner))
    store.add("critic.head.w", (1, d), gain=0.01)
    store.add("critic.head.b", (1,), init="zeros")


def _multi_head(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int
) -> torch.Tensor:
    """Scaled dot-product attention. q [..., Lq, inner], k/v [..., Lk, inner]."""
    lq, lk = q.shape[-2], k.shape[-2]
    dh = q.shape[-1] // n_heads
    qh = q.reshape(*q.shape[:-1], n_heads, dh).transpose(-3, -2)  # [..., H, Lq, dh]
    kh = k.reshape(*k.shape[:-1], n_heads, dh).transpose(-3, -2)
    vh = v.reshape(*v.shape[:-1], n_heads, dh).transpose(-3, -2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    weights = softmax(scores, axis=-1)
    out = weights @ vh  # [..., H, Lq, dh]
    return out.transpose(-3, -2).reshape(*q.shape[:-2], lq, n_heads * dh)


def self_attention(
    enh: torch.Tensor, params: ParameterStore, cfg: ModelConfig
) -> torch.Tensor:
    """Per-entity embeddings [..., m, attn_dim] from enhanced rows [..., m, F]."""
    q = linear(enh, params["attn_self.wq"])
    k = linear(enh, params["attn_self.wk"])
    v = linear(enh, params["attn_self.wv"])
    out = _multi_head(q, k, v, cfg.n_heads)
    return linear(out, params["attn_self.wo"])


def skill_embedding(skill: torch.Tensor, params: ParameterStore) -> torch.Tensor:
    h = torch.tanh(linear(skill, params["skill.mlp.w1"], params["skill.mlp.b1"]))
    return linear(h, params["skill.mlp.w2"], params["skill.mlp.b2"])


def skill_attention(
    enh: torch.Tensor, skill: torch.Tensor, params: ParameterStore, cfg: ModelConfig
) -> torch.Tensor:
    """Skill-conditioned summary [..., attn_dim]: the skill queries the entities."""
    q = linear(skill_embedding(skill, params), params["attn_skill.wq"]).unsqueeze(-2)
    k = linear(enh, params["attn_skill.wk"])
    v = linear(enh, params["attn_skill.wv"])
    out = _multi_head(q, k, v, cfg.n_heads).squeeze(-2)
    return linear(out, params["attn_skill.wo"])


def skill_attention_weights(
    enh: torch.Tensor, skill: torch.Tensor, params: ParameterStore, cfg: ModelConfig
) -> torch.Tensor:
    """Per-head attention weights [..., H, m] over entities (diagnostics/tests)."""
    q = linear(skill_embedding(skill, params), params["attn_skill.wq"]).unsqueeze(-2)
    k = linear(enh, params["attn_skill.wk"])
    dh = cfg.head_dim
    qh = q.reshape(*q.shape[:-1], cfg.n_heads, dh).transpose(-3, -2)
    kh = k.reshape(*k.shape[:-1], cfg.n_heads, dh).transpose(-3, -2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    return softmax(scores, axis=-1).squeeze(-2)


def assign_skill(
    integration: DiagonalGaussian,
    params: ParameterStore,
    cfg: ModelConfig,
    rng: Optional[Rng] = None,
    eps: Optional[torch.Tensor] = None,
    gumbel_noise: Optional[torch.Tensor] = None,
    hard: bool = True,
) -> torch.Tensor:
    """One sample from the integrated belief -> K logits -> straight-through skill."""
    if eps is None:
        eps = rng.normal(*integration.mu.shape)
    x = integration.mu + integration.sigma * eps
    logits = linear(x, params["skill.head.w"], params["skill.head.b"])
    return gumbel_softmax(logits, cfg.gumbel_temperature, rng, hard=hard, noise=gumbel_noise)


def enhance_observation(
    obs_rows: torch.Tensor,
    obs_mask: torch.Tensor,
    masked: MaskedBelief,
    params: ParameterStore,
    cfg: ModelConfig,
    rng: Optional[Rng] = None,
    eps_rows: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Replace each unobserved row by a decoded independent belief sample.

    Observed rows pass through unchanged. Under no_masked_inference the
    observation is returned as-is (masked rows stay zero); under
    no_decoder_reuse a separate decoder produces the masked rows instead of
    the observation VAE's.
    """
    if cfg.ablation == "no_masked_inference":
        return obs_rows
    m = obs_rows.shape[-2]
    g = masked.gaussian
    if eps_rows is None:
        eps_rows = rng.normal(*g.mu.shape[:-1], m, g.mu.shape[-1])
    samples = g.mu.unsqueeze(-2) + g.sigma.unsqueeze(-2) * eps_rows
    prefix = AUX_DECODER if cfg.ablation == "no_decoder_reuse" else latent.OBS_VAE
    decoded = decode_obs(samples, params, prefix=prefix)
    w = obs_mask.unsqueeze(-1)
    return w * obs_rows + (1.0 - w) * decoded


def action_distribution(
    tau_self: torch.Tensor,
    tau_skill: torch.Tensor,
    self_index: torch.Tensor,
    target_rows: torch.Tensor,
    availability: torch.Tensor,
    params: ParameterStore,
) -> torch.Tensor:
    """Masked log-probabilities over [5 self-moves, one tag per target].

    tau_self [..., m, d]; tau_skill [..., d]; self_index [...] (long) selects
    the agent's own embedding row; target_rows [p] (long) are the entity rows
    backing the tag actions; availability [..., 5+p] bool. The tag head is a
    single entity-wise linear map, so adding a target adds one logit without
    adding parameters.
    """
    d = tau_self.shape[-1]
    idx = self_index[..., None, None].expand(*self_index.shape, 1, d)
    self_emb = torch.gather(tau_self, -2, idx).squeeze(-2)
    logits_self = linear(
        torch.cat([self_emb, tau_skill], dim=-1), params["act.self.w"], params["act.self.b"]
    )
    tau_targets = tau_self.index_select(-2, target_rows)
    skill_b = tau_skill.unsqueeze(-2).expand_as(tau_targets)
    logits_out = linear(
        torch.cat([tau_targets, skill_b], dim=-1), params["act.out.w"], params["act.out.b"]
    ).squeeze(-1)
    logits = torch.cat([logits_self, logits_out], dim=-1)
    masked_logits = torch.where(availability, logits, torch.tensor(NEG_INF, dtype=logits.dtype))
    return torch.log_softmax(masked_logits, dim=-1)


def draw_noises(
    cfg: ModelConfig, batch_shape: Tuple[int, ...], m: int, rng: Rng
) -> Dict[str, torch.Tensor]:
    """All stochastic draws one actor forward consumes, in a fixed order.

    Stored in the rollout buffer and replayed verbatim during PPO updates so
    recomputed log-probabilities match the behavior policy exactly.
    """
    D, K = cfg.latent_dim, cfg.n_skills
    return {
        "eps_obs": rng.normal(*batch_shape, D),
        "eps_int": rng.normal(*batch_shape, D),
        "eps_state": rng.normal(*batch_shape, D),
        "eps_rows": rng.normal(*batch_shape, m, D),
        "eps_skill": rng.normal(*batch_shape, D),
        "gumbel": rng.gumbel(*batch_shape, K),
    }


def policy_forward(
    obs_rows: torch.Tensor,
    obs_mask: torch.Tensor,
    state_rows: torch.Tensor,
    availability: torch.Tensor,
    h_prev: torch.Tensor,
    self_index: torch.Tensor,
    target_rows: torch.Tensor,
    params: ParameterStore,
    cfg: ModelConfig,
    noises: Dict[str, torch.Tensor],
) -> Dict[str, torch.Tensor]:
    """End-to-end actor forward, batched over arbitrary leading dimensions.

    Returns log_probs [..., A], skill [..., K], h [..., H], recon [...]
    (per-element reconstruction loss), and the masked/integrated beliefs.
    """
    masked, recon, h_new, observed, integration = mae_forward(
        obs_rows, obs_mask, state_rows, RecurrentState(h_prev), params,
        noises=noises, reduction="none",
    )
    if cfg.ablation == "no_masked_inference":
        # the action decoder ignores the inferred belief: integration collapses
        # to (approximately) the observed fusion via an uninformative belief
        flat = MaskedBelief(DiagonalGaussian(
            mu=torch.zeros_like(observed.mu),
            sigma=torch.full_like(observed.sigma, SIGMA_MAX),
        ))
        decoder_masked = flat
        decoder_integration = integrate(observed, flat)
    else:
        decoder_masked = masked
        decoder_integration = integration
    skill = assign_skill(
        decoder_integration, params, cfg,
        eps=noises["eps_skill"], gumbel_noise=noises["gumbel"],
    )
    enh = enhance_observation(
        obs_rows, obs_mask, decoder_masked, params, cfg, eps_rows=noises["eps_rows"]
    )
    tau_self = self_attention(enh, params, cfg)
    tau_skill = skill_attention(enh, skill, params, cfg)
    log_probs = action_distribution(
        tau_self, tau_skill, self_index, target_rows, availability, params
    )
    return {
        "log_probs": log_probs,
        "skill": skill,
        "h": h_new.h,
        "recon": recon,
        "masked": decoder_masked,
        "integration": decoder_integration,
    }


def _gru_scan(
    x_seq: torch.Tensor, h0: torch.Tensor, params: ParameterStore, prefix: str = "mae.gru"
) -> torch.Tensor:
    """Run the recurrent cell over a [T, ...] sequence.

    The input projection is hoisted out of the time loop (it has no recurrent
    dependency), leaving only one matmul plus pointwise ops per step. Bitwise
    equivalent to stepping gated_recurrent_step.
    """
    w_hh = params[f"{prefix}.w_hh"]
    b_hh = params[f"{prefix}.b_hh"]
    h_dim = h0.shape[-1]
    gi_seq = linear(x_seq, params[f"{prefix}.w_ih"], params[f"{prefix}.b_ih"])
    h = h0
    hs = []
    for t in range(x_seq.shape[0]):
        gh = linear(h, w_hh, b_hh)
        i_r, i_z, i_n = gi_seq[t].split(h_dim, dim=-1)
        h_r, h_z, h_n = gh.split(h_dim, dim=-1)
        r = torch.sigmoid(i_r + h_r)
        z = torch.sigmoid(i_z + h_z)
        n = torch.tanh(i_n + r * h_n)
        h = (1.0 - z) * n + z * h
        hs.append(h)
    return torch.stack(hs, dim=0)


def mae_sequence(
    obs_rows: torch.Tensor,      # [T, ..., m, F]
    obs_mask: torch.Tensor,      # [T, ..., m]
    state_rows: torch.Tensor,    # [T, ..., m, F]
    params: ParameterStore,
    cfg: ModelConfig,
    noises: Dict[str, torch.Tensor],
) -> Dict[str, object]:
    """Whole-episode masked-inference forward (time-parallel except the cell).

    Matches stepping mae_forward with zero initial hidden state; returns the
    per-step masked belief, integration, and reconstruction loss.
    """
    from .latent import encode_obs, encode_state, fuse_masked
    from .maskinfer import MaskedBelief
    from .numerics import clamp_log_sigma

    g_rows = encode_obs(obs_rows, params)
    observed = fuse_masked(g_rows.mu, g_rows.sigma, obs_mask)
    x_seq = observed.mu + observed.sigma * noises["eps_obs"]
    h0 = torch.zeros(*x_seq.shape[1:-1], cfg.hidden_dim, dtype=torch.float64)
    hs = _gru_scan(x_seq, h0, params)
    mu_m = linear(hs, params["mae.w_mu"], params["mae.b_mu"])
    sigma_m = torch.exp(clamp_log_sigma(linear(hs, params["mae.w_ls"], params["mae.b_ls"])))
    masked = MaskedBelief(DiagonalGaussian(mu=mu_m, sigma=sigma_m))
    integration = integrate(observed, masked)
    g_state = encode_state(state_rows, params)
    states = fuse_masked(g_state.mu, g_state.sigma, torch.ones_like(obs_mask))
    x = integration.mu + integration.sigma * noises["eps_int"]
    y = states.mu + states.sigma * noises["eps_state"]
    recon = ((y - x) ** 2).sum(dim=-1)
    return {
        "observed": observed,
        "masked": masked,
        "integration": integration,
        "recon": recon,
        "hidden": hs,
    }


def policy_forward_sequence(
    obs_rows: torch.Tensor,      # [T, B, n, m, F]
    obs_mask: torch.Tensor,      # [T, B, n, m]
    state_rows: torch.Tensor,    # [T, B, n, m, F]
    availability: torch.Tensor,  # [T, B, n, A] bool
    self_index: torch.Tensor,    # [T, B, n] long
    target_rows: torch.Tensor,   # [p] long
    params: ParameterStore,
    cfg: ModelConfig,
    noises: Dict[str, torch.Tensor],
) -> Dict[str, torch.Tensor]:
    """Whole-episode actor forward used by PPO replay.

    Numerically equivalent to stepping policy_forward from a zero hidden
    state with the same noises, but everything without a recurrent dependency
    is batched over time.
    """
    seq = mae_sequence(obs_rows, obs_mask, state_rows, params, cfg, noises)
    if cfg.ablation == "no_masked_inference":
        observed = seq["observed"]
        flat = MaskedBelief(DiagonalGaussian(
            mu=torch.zeros_like(observed.mu),
            sigma=torch.full_like(observed.sigma, SIGMA_MAX),
        ))
        decoder_masked = flat
        decoder_integration = integrate(observed, flat)
    else:
        decoder_masked = seq["masked"]
        decoder_integration = seq["integration"]
    skill = assign_skill(
        decoder_integration, params, cfg,
        eps=noises["eps_skill"], gumbel_noise=noises["gumbel"],
    )
    enh = enhance_observation(
        obs_rows, obs_mask, decoder_masked, params, cfg, eps_rows=noises["eps_rows"]
    )
    tau_self = self_attention(enh, params, cfg)
    tau_skill = skill_attention(enh, skill, params, cfg)
    log_probs = action_distribution(
        tau_self, tau_skill, self_index, target_rows, availability, params
    )
    return {
        "log_probs": log_probs,
        "skill": skill,
        "recon": seq["recon"],
        "hidden": seq["hidden"],
    }


def act(
    obs: EntityObservation,
    state: EntityState,
    h_prev: RecurrentState,
    availability: np.ndarray,
    params: ParameterStore,
    cfg: ModelConfig,
    rng: Rng,
    greedy: bool = False,
) -> Tuple[int, float, torch.Tensor, RecurrentState, float]:
    """Single-agent step: returns (action, log_prob, skill, new hidden, recon loss)."""
    n_agents = state.config.n_agents
    m = state.config.n_entities
    obs_t = torch.from_numpy(obs.rows).to(torch.float64)
    mask_t = torch.from_numpy(obs.mask).to(torch.float64)
    state_t = torch.from_numpy(state.rows).to(torch.float64)
    avail_t = torch.from_numpy(np.asarray(availability, dtype=bool))
    self_idx = torch.tensor(obs.self_index, dtype=torch.long)
    target_rows = torch.arange(n_agents, m, dtype=torch.long)
    noises = draw_noises(cfg, (), m, rng)
    with torch.no_grad():
        out = policy_forward(
            obs_t, mask_t, state_t, avail_t, h_prev.h, self_idx, target_rows,
            params, cfg, noises,
        )
    log_probs = out["log_probs"]
    if greedy:
        action = int(log_probs.argmax())
    else:
        probs = torch.exp(log_probs).numpy()
        action = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum()))
    return (
        action,
        float(log_probs[action]),
        out["skill"].detach(),
        RecurrentState(out["h"].detach()),
        float(out["recon"]),
    )


def critic_value(
    state_rows: torch.Tensor, params: ParameterStore, cfg: ModelConfig
) -> torch.Tensor:
    """Centralized value: state-encoder means -> self-attention -> pool -> head."""
    z = encode_state(state_rows, params).mu
    q = linear(z, params["attn_v.wq"])
    k = linear(z, params["attn_v.wk"])
    v = linear(z, params["attn_v.wv"])
    emb = linear(_multi_head(q, k, v, cfg.n_heads), params["attn_v.wo"])
    pooled = emb.mean(dim=-2)
    return linear(pooled, params["critic.head.w"], params["critic.head.b"]).squeeze(-1)
