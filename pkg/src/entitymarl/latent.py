"""Entity-row variational autoencoders and Gaussian-product fusion.

Two VAEs map fixed-width entity rows into diagonal-Gaussian latents: one over
an agent's (relative) entity-observations, one over global entity-states.
Precision-weighted Gaussian products turn variable-length sets of per-entity
latents into a single fixed-dimension belief, independent of entity order.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch

from .numerics import (
    DiagonalGaussian,
    DimensionError,
    ParameterStore,
    Rng,
    clamp_log_sigma,
    clamp_sigma,
    linear,
    reparameterized_sample,
)

OBS_VAE = "vae_o"
STATE_VAE = "vae_s"


def build_vae_params(
    store: ParameterStore,
    prefix: str,
    feat_dim: int,
    hidden_dim: int = 64,
    latent_dim: int = 8,
) -> None:
    """Declare encoder/decoder weights for one VAE under `prefix`."""
    store.add(f"{prefix}.enc.w1", (hidden_dim, feat_dim))
    store.add(f"{prefix}.enc.b1", (hidden_dim,), init="zeros")
    store.add(f"{prefix}.enc.w_mu", (latent_dim, hidden_dim), gain=0.01)
    store.add(f"{prefix}.enc.b_mu", (latent_dim,), init="zeros")
    store.add(f"{prefix}.enc.w_ls", (latent_dim, hidden_dim), gain=0.01)
    store.add(f"{prefix}.enc.b_ls", (latent_dim,), init="zeros")
    store.add(f"{prefix}.dec.w1", (hidden_dim, latent_dim))
    store.add(f"{prefix}.dec.b1", (hidden_dim,), init="zeros")
    store.add(f"{prefix}.dec.w2", (feat_dim, hidden_dim), gain=0.01)
    store.add(f"{prefix}.dec.b2", (feat_dim,), init="zeros")


def encode(rows: torch.Tensor, params: ParameterStore, prefix: str) -> DiagonalGaussian:
    """Entity row(s) [..., F] -> per-row Gaussian [..., D]; sigma clamped."""
    h = torch.tanh(linear(rows, params[f"{prefix}.enc.w1"], params[f"{prefix}.enc.b1"]))
    mu = linear(h, params[f"{prefix}.enc.w_mu"], params[f"{prefix}.enc.b_mu"])
    log_sigma = clamp_log_sigma(
        linear(h, params[f"{prefix}.enc.w_ls"], params[f"{prefix}.enc.b_ls"])
    )
    return DiagonalGaussian(mu=mu, sigma=torch.exp(log_sigma))


def decode(z: torch.Tensor, params: ParameterStore, prefix: str) -> torch.Tensor:
    """Latent sample(s) [..., D] -> entity row(s) [..., F]."""
    h = torch.tanh(linear(z, params[f"{prefix}.dec.w1"], params[f"{prefix}.dec.b1"]))
    return linear(h, params[f"{prefix}.dec.w2"], params[f"{prefix}.dec.b2"])


def encode_obs(rows: torch.Tensor, params: ParameterStore) -> DiagonalGaussian:
    return encode(rows, params, OBS_VAE)


def decode_obs(z: torch.Tensor, params: ParameterStore, prefix: str = OBS_VAE) -> torch.Tensor:
    return decode(z, params, prefix)


def encode_state(rows: torch.Tensor, params: ParameterStore) -> DiagonalGaussian:
    return encode(rows, params, STATE_VAE)


def decode_state(z: torch.Tensor, params: ParameterStore) -> torch.Tensor:
    return decode(z, params, STATE_VAE)


def gaussian_product(gs: Sequence[DiagonalGaussian]) -> DiagonalGaussian:
    """Precision-weighted fusion of diagonal Gaussians (order independent)."""
    if len(gs) == 0:
        raise DimensionError("gaussian_product: empty input")
    dim = gs[0].dim
    for g in gs:
        if g.dim != dim:
            raise DimensionError(f"gaussian_product: mixed dimensions {dim} vs {g.dim}")
    mu = torch.stack([g.mu for g in gs], dim=0)
    sigma = torch.stack([g.sigma for g in gs], dim=0)
    prec = 1.0 / (sigma * sigma)
    lam = prec.sum(dim=0)
    fused_mu = (mu * prec).sum(dim=0) / lam
    fused_sigma = clamp_sigma(torch.sqrt(1.0 / lam))
    return DiagonalGaussian(mu=fused_mu, sigma=fused_sigma)


def fuse_masked(
    mu: torch.Tensor, sigma: torch.Tensor, mask: torch.Tensor
) -> DiagonalGaussian:
    """Batched Gaussian product over the row axis, weighted by a 0/1 mask.

    mu, sigma: [..., R, D]; mask: [..., R] with at least one 1 per batch item
    (the observing agent's own row is always visible).
    """
    w = mask.unsqueeze(-1)
    prec = w / (sigma * sigma)
    lam = prec.sum(dim=-2)
    fused_mu = (mu * prec).sum(dim=-2) / lam
    fused_sigma = clamp_sigma(torch.sqrt(1.0 / lam))
    return DiagonalGaussian(mu=fused_mu, sigma=fused_sigma)


def vae_loss(
    obs_rows: torch.Tensor,
    obs_mask: torch.Tensor,
    state_rows: torch.Tensor,
    params: ParameterStore,
    rng: Rng,
    kl_weight: float = 0.0,
) -> torch.Tensor:
    """Reconstruction objective of both VAEs through one sample per row.

    Observation term over observed rows only (mask = 1); state term over all
    rows. Mean squared row-reconstruction error, differentiable w.r.t. all
    four encoder/decoder parameter subsets. `kl_weight` optionally adds a
    standard-normal KL regularizer (default off).
    """
    g_o = encode_obs(obs_rows, params)
    x_o = reparameterized_sample(g_o, rng)
    rec_o = decode_obs(x_o, params)
    err_o = ((rec_o - obs_rows) ** 2).sum(dim=-1)
    n_obs = obs_mask.sum().clamp(min=1.0)
    loss_o = (err_o * obs_mask).sum() / n_obs

    g_s = encode_state(state_rows, params)
    x_s = reparameterized_sample(g_s, rng)
    rec_s = decode_state(x_s, params)
    loss_s = ((rec_s - state_rows) ** 2).sum(dim=-1).mean()

    loss = loss_o + loss_s
    if kl_weight > 0.0:
        for g, m in ((g_o, obs_mask), (g_s, None)):
            kl = 0.5 * (g.mu**2 + g.sigma**2 - 2.0 * torch.log(g.sigma) - 1.0).sum(dim=-1)
            if m is not None:
                kl = (kl * m).sum() / n_obs
            else:
                kl = kl.mean()
            loss = loss + kl_weight * kl
    return loss
