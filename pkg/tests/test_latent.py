"""Entity VAEs and Gaussian-product fusion against closed-form oracles."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from entitymarl import latent
from entitymarl.latent import (
    OBS_VAE,
    STATE_VAE,
    build_vae_params,
    decode_obs,
    encode_obs,
    encode_state,
    fuse_masked,
    gaussian_product,
    vae_loss,
)
from entitymarl.numerics import (
    SIGMA_MAX,
    SIGMA_MIN,
    DiagonalGaussian,
    DimensionError,
    ParameterStore,
    Rng,
    finite_difference_gradient,
)
from test_numerics import rel_err

F, D = 6, 8


def make_store(seed=0):
    store = ParameterStore(seed)
    build_vae_params(store, OBS_VAE, F, 64, D)
    build_vae_params(store, STATE_VAE, F, 64, D)
    return store


def random_gaussian(rng, *shape, dim=D):
    mu = rng.normal(*shape, dim)
    sigma = 0.05 + 2.0 * rng.uniform(*shape, dim)
    return DiagonalGaussian(mu=mu, sigma=sigma)


class TestEncoders:
    def test_sigma_clamped(self):
        store = make_store()
        rows = 100.0 * Rng(1).normal(32, F)
        g = encode_obs(rows, store)
        assert bool((g.sigma >= SIGMA_MIN).all()) and bool((g.sigma <= SIGMA_MAX).all())

    def test_identical_rows_identical_gaussians(self):
        store = make_store()
        row = Rng(2).normal(F)
        g1, g2 = encode_obs(row, store), encode_obs(row.clone(), store)
        assert torch.equal(g1.mu, g2.mu) and torch.equal(g1.sigma, g2.sigma)

    def test_decoder_output_width(self):
        store = make_store()
        z = Rng(3).normal(7, D)
        assert decode_obs(z, store).shape == (7, F)

    def test_obs_and_state_encoders_are_distinct_parameters(self):
        store = make_store()
        row = Rng(4).normal(F)
        g_o, g_s = encode_obs(row, store), encode_state(row, store)
        assert not torch.allclose(g_o.mu, g_s.mu)


class TestGaussianProduct:
    def test_empty_rejected(self):
        with pytest.raises(DimensionError):
            gaussian_product([])

    def test_single_gaussian_identity(self):
        g = random_gaussian(Rng(5))
        out = gaussian_product([g])
        assert float((out.mu - g.mu).abs().max()) < 1e-12
        assert float((out.sigma - g.sigma).abs().max()) < 1e-12

    def test_two_standard_gaussians_closed_form(self):
        # N(0,1) x N(2,1) -> N(1, sigma^2 = 0.5)
        one = torch.ones(1, dtype=torch.float64)
        a = DiagonalGaussian(mu=0.0 * one, sigma=one)
        b = DiagonalGaussian(mu=2.0 * one, sigma=one)
        out = gaussian_product([a, b])
        assert abs(float(out.mu) - 1.0) < 1e-12
        assert abs(float(out.sigma) - math.sqrt(0.5)) < 1e-12

    def test_matches_precision_weighted_formula(self):
        rng = Rng(6)
        for _ in range(200):
            gs = [random_gaussian(rng) for _ in range(int(rng.integers(1, 6)))]
            out = gaussian_product(gs)
            prec = sum(1.0 / g.sigma**2 for g in gs)
            mu = sum(g.mu / g.sigma**2 for g in gs) / prec
            sigma = torch.clamp(torch.sqrt(1.0 / prec), SIGMA_MIN, SIGMA_MAX)
            assert float((out.mu - mu).abs().max()) < 1e-9
            assert float((out.sigma - sigma).abs().max()) < 1e-9

    @given(st.integers(0, 10_000), st.integers(2, 16))
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariant(self, seed, k):
        rng = Rng(seed)
        gs = [random_gaussian(rng) for _ in range(k)]
        ref = gaussian_product(gs)
        perm = Rng(seed + 1).permutation(k)
        out = gaussian_product([gs[i] for i in perm])
        assert float((out.mu - ref.mu).abs().max()) < 1e-9
        assert float((out.sigma - ref.sigma).abs().max()) < 1e-9

    def test_k_identical_gaussians_shrink_sigma(self):
        g = random_gaussian(Rng(7))
        for k in (2, 3, 5):
            out = gaussian_product([g] * k)
            assert float((out.mu - g.mu).abs().max()) < 1e-9
            expected = torch.clamp(g.sigma / math.sqrt(k), SIGMA_MIN, SIGMA_MAX)
            assert float((out.sigma - expected).abs().max()) < 1e-9

    def test_mixed_dimensions_rejected(self):
        a = random_gaussian(Rng(8), dim=4)
        b = random_gaussian(Rng(9), dim=5)
        with pytest.raises(DimensionError):
            gaussian_product([a, b])

    def test_output_dim_independent_of_set_size(self):
        rng = Rng(10)
        for k in (1, 4, 16):
            out = gaussian_product([random_gaussian(rng) for _ in range(k)])
            assert out.mu.shape[-1] == D


class TestFuseMasked:
    def test_matches_list_product_on_visible_rows(self):
        rng = Rng(11)
        mu = rng.normal(5, D)
        sigma = 0.1 + rng.uniform(5, D)
        mask = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
        out = fuse_masked(mu, sigma, mask)
        ref = gaussian_product(
            [DiagonalGaussian(mu[i], sigma[i]) for i in range(5) if mask[i] > 0]
        )
        assert float((out.mu - ref.mu).abs().max()) < 1e-9
        assert float((out.sigma - ref.sigma).abs().max()) < 1e-9

    def test_batched_masks(self):
        rng = Rng(12)
        mu = rng.normal(4, 6, D)
        sigma = 0.1 + rng.uniform(4, 6, D)
        mask = (rng.uniform(4, 6) > 0.5).double()
        mask[:, 0] = 1.0
        out = fuse_masked(mu, sigma, mask)
        for b in range(4):
            ref = fuse_masked(mu[b], sigma[b], mask[b])
            assert float((out.mu[b] - ref.mu).abs().max()) < 1e-12


class TestVaeLoss:
    def test_nonnegative(self):
        store = make_store()
        rng = Rng(13)
        obs = rng.normal(10, F)
        mask = torch.ones(10, dtype=torch.float64)
        assert float(vae_loss(obs, mask, rng.normal(10, F), store, rng).detach()) >= 0.0

    def test_obs_term_ignores_masked_rows(self):
        store = make_store()
        rng = Rng(14)
        obs = rng.normal(6, F)
        states = rng.normal(6, F)
        mask = torch.tensor([1, 1, 1, 0, 0, 0], dtype=torch.float64)
        # corrupting masked observation rows must not change the loss
        obs2 = obs.clone()
        obs2[3:] = 999.0
        l1 = float(vae_loss(obs, mask, states, store, Rng(15)).detach())
        l2 = float(vae_loss(obs2, mask, states, store, Rng(15)).detach())
        assert abs(l1 - l2) < 1e-12

    def test_gradient_matches_finite_differences(self):
        store = ParameterStore(2)
        build_vae_params(store, OBS_VAE, 3, 8, 2)
        build_vae_params(store, STATE_VAE, 3, 8, 2)
        rng = Rng(16)
        obs = rng.normal(4, 3)
        states = rng.normal(4, 3)
        mask = torch.ones(4, dtype=torch.float64)
        noise_rng_seed = 17

        def f(s):
            return vae_loss(obs, mask, states, s, Rng(noise_rng_seed))

        f(store).backward()
        fd = finite_difference_gradient(
            f, store, names=store.names(), coords_per_param=4, rng=Rng(18)
        )
        for name in store.names():
            if store[name].grad is None:
                continue
            assert rel_err(store[name].grad.numpy(), fd[name]) < 1e-3, name

    def test_kl_weight_adds_positive_regularizer(self):
        store = make_store()
        rng = Rng(19)
        obs = rng.normal(5, F)
        mask = torch.ones(5, dtype=torch.float64)
        states = rng.normal(5, F)
        l0 = float(vae_loss(obs, mask, states, store, Rng(20), kl_weight=0.0))
        l1 = float(vae_loss(obs, mask, states, store, Rng(20), kl_weight=1.0))
        assert l1 > l0
