"""Masked-entity inference: recurrent belief over unobserved entities.

A gated recurrent cell consumes a sample of the fused observed-entity belief
plus its previous hidden state, and two linear heads emit a Gaussian belief
over everything currently unobserved. That belief is fused with the observed
belief (Gaussian product) and scored against the global-state belief with a
sampled squared-distance reconstruction loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from .numerics import (
    DiagonalGaussian,
    ParameterStore,
    Rng,
    clamp_log_sigma,
    gated_recurrent_step,
    linear,
    reparameterized_sample,
)
from .latent import encode_obs, encode_state, fuse_masked, gaussian_product

GRU_PREFIX = "mae.gru"


@dataclass
class RecurrentState:
    """Hidden state of the masked-inference cell; zeros at episode start."""

    h: torch.Tensor

    @staticmethod
    def initial(hidden_dim: int, batch_shape: Tuple[int, ...] = ()) -> "RecurrentState":
        return RecurrentState(h=torch.zeros(*batch_shape, hidden_dim, dtype=torch.float64))


@dataclass
class MaskedBelief:
    gaussian: DiagonalGaussian


def build_maskinfer_params(
    store: ParameterStore,
    latent_dim: int = 8,
    hidden_dim: int = 64,
) -> None:
    store.add(f"{GRU_PREFIX}.w_ih", (3 * hidden_dim, latent_dim))
    store.add(f"{GRU_PREFIX}.w_hh", (3 * hidden_dim, hidden_dim))
    store.add(f"{GRU_PREFIX}.b_ih", (3 * hidden_dim,), init="zeros")
    store.add(f"{GRU_PREFIX}.b_hh", (3 * hidden_dim,), init="zeros")
    store.add("mae.w_mu", (latent_dim, hidden_dim), gain=0.01)
    store.add("mae.b_mu", (latent_dim,), init="zeros")
    store.add("mae.w_ls", (latent_dim, hidden_dim), gain=0.01)
    store.add("mae.b_ls", (latent_dim,), init="zeros")


def infer_masked(
    observed: DiagonalGaussian,
    h_prev: RecurrentState,
    params: ParameterStore,
    rng: Optional[Rng] = None,
    noise: Optional[torch.Tensor] = None,
) -> Tuple[MaskedBelief, RecurrentState]:
    """Belief over all unobserved entities from observed belief + history."""
    x = reparameterized_sample(observed, rng, noise=noise)
    h = gated_recurrent_step(x, h_prev.h, params, prefix=GRU_PREFIX)
    mu = linear(h, params["mae.w_mu"], params["mae.b_mu"])
    log_sigma = clamp_log_sigma(linear(h, params["mae.w_ls"], params["mae.b_ls"]))
    belief = MaskedBelief(DiagonalGaussian(mu=mu, sigma=torch.exp(log_sigma)))
    return belief, RecurrentState(h=h)


def integrate(observed: DiagonalGaussian, masked: MaskedBelief) -> DiagonalGaussian:
    """Precision-weighted merge of observed and inferred beliefs."""
    return gaussian_product([observed, masked.gaussian])


def reconstruction_loss(
    integration: DiagonalGaussian,
    states: DiagonalGaussian,
    rng: Optional[Rng] = None,
    noise_x: Optional[torch.Tensor] = None,
    noise_y: Optional[torch.Tensor] = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Squared distance between one sample from each belief.

    Scalar mean by default; reduction="none" keeps per-batch-element values
    (used by the trainer to record per-step losses).
    """
    x = reparameterized_sample(integration, rng, noise=noise_x)
    y = reparameterized_sample(states, rng, noise=noise_y)
    sq = ((y - x) ** 2).sum(dim=-1)
    return sq if reduction == "none" else sq.mean()


def mae_forward(
    obs_rows: torch.Tensor,
    obs_mask: torch.Tensor,
    state_rows: torch.Tensor,
    h_prev: RecurrentState,
    params: ParameterStore,
    rng: Optional[Rng] = None,
    noises: Optional[dict] = None,
    reduction: str = "mean",
) -> Tuple[MaskedBelief, torch.Tensor, RecurrentState, DiagonalGaussian, DiagonalGaussian]:
    """Full masked-inference pipeline for one agent step (batched over [...]).

    obs_rows [..., m, F] with visibility obs_mask [..., m]; state_rows the
    matching global rows. Returns (masked belief, reconstruction loss, new
    hidden state, observed fusion, integrated belief). Handles any number of
    masked entities from 0 to m-1 without reconfiguration; the self row is
    always visible so the observed fusion is never empty.
    """
    noises = noises or {}
    g_rows = encode_obs(obs_rows, params)
    observed = fuse_masked(g_rows.mu, g_rows.sigma, obs_mask)
    masked, h_new = infer_masked(observed, h_prev, params, rng, noise=noises.get("eps_obs"))
    integration = integrate(observed, masked)
    g_state_rows = encode_state(state_rows, params)
    ones = torch.ones_like(obs_mask)
    states = fuse_masked(g_state_rows.mu, g_state_rows.sigma, ones)
    loss = reconstruction_loss(
        integration,
        states,
        rng,
        noise_x=noises.get("eps_int"),
        noise_y=noises.get("eps_state"),
        reduction=reduction,
    )
    return masked, loss, h_new, observed, integration
