"""Numerics core: gradients vs the finite-difference oracle, samplers, Adam."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from entitymarl.numerics import (
    SIGMA_MAX,
    SIGMA_MIN,
    DiagonalGaussian,
    DimensionError,
    InvariantError,
    ParameterError,
    ParameterStore,
    Rng,
    StateError,
    adam_step,
    finite_difference_gradient,
    gated_recurrent_step,
    gumbel_softmax,
    linear,
    reparameterized_sample,
    softmax,
)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Worst relative disagreement; absolute below 1e-6 magnitude."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    keep = ~np.isnan(b)
    a, b = a[keep], b[keep]
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


class TestLinear:
    def test_identity_map(self):
        x = torch.tensor([1.0, 0.0], dtype=torch.float64)
        w = torch.eye(2, dtype=torch.float64)
        b = torch.zeros(2, dtype=torch.float64)
        assert torch.equal(linear(x, w, b), x)

    def test_hand_matrix_multiply(self):
        x = torch.tensor([1.0, 1.0], dtype=torch.float64)
        w = torch.tensor([[2.0, 3.0], [4.0, 5.0]], dtype=torch.float64)
        b = torch.tensor([1.0, 1.0], dtype=torch.float64)
        assert torch.equal(linear(x, w, b), torch.tensor([6.0, 10.0], dtype=torch.float64))

    def test_zero_input_returns_bias(self):
        x = torch.zeros(2, dtype=torch.float64)
        w = torch.randn(2, 2, dtype=torch.float64)
        b = torch.tensor([7.0, -2.0], dtype=torch.float64)
        assert torch.equal(linear(x, w, b), b)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as e:
            linear(torch.zeros(3, dtype=torch.float64), torch.zeros(2, 2, dtype=torch.float64))
        assert "(3,)" in str(e.value) and "(2, 2)" in str(e.value)

    def test_gradient_matches_finite_differences(self):
        store = ParameterStore(0)
        store.add("w", (3, 4))
        store.add("b", (3,), init="zeros")
        x = Rng(1).normal(5, 4)

        def f(s):
            return (linear(x, s["w"], s["b"]) ** 2).sum()

        loss = f(store)
        loss.backward()
        fd = finite_difference_gradient(f, store)
        assert rel_err(store["w"].grad.numpy(), fd["w"]) < 1e-4
        assert rel_err(store["b"].grad.numpy(), fd["b"]) < 1e-4


class TestSoftmax:
    def test_uniform_on_equal_logits(self):
        out = softmax(torch.zeros(3, dtype=torch.float64))
        assert torch.allclose(out, torch.full((3,), 1 / 3, dtype=torch.float64))

    def test_stable_under_large_logits(self):
        out = softmax(torch.tensor([1000.0, 1000.0], dtype=torch.float64))
        assert torch.allclose(out, torch.tensor([0.5, 0.5], dtype=torch.float64))

    def test_closed_form(self):
        out = softmax(torch.log(torch.tensor([1.0, 3.0], dtype=torch.float64)))
        assert torch.allclose(out, torch.tensor([0.25, 0.75], dtype=torch.float64))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        t = torch.tensor(logits, dtype=torch.float64)
        out = softmax(t)
        assert abs(float(out.sum()) - 1.0) < 1e-12
        assert float((softmax(t + shift) - out).abs().max()) < 1e-12


class TestGumbelSoftmax:
    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(ParameterError):
            gumbel_softmax(torch.zeros(3, dtype=torch.float64), temperature=0.0, rng=Rng(0))

    def test_soft_sample_on_simplex(self):
        rng = Rng(3)
        y = gumbel_softmax(rng.normal(6, 4), temperature=0.7, rng=rng, hard=False)
        assert bool((y >= 0).all())
        assert float((y.sum(dim=-1) - 1.0).abs().max()) < 1e-12

    def test_dominant_logit_frequency(self):
        rng = Rng(4)
        logits = torch.tensor([10.0, -10.0], dtype=torch.float64).expand(100_000, 2)
        hits = gumbel_softmax(logits, 1.0, rng)[:, 0].mean()
        assert float(hits) > 0.999

    def test_uniform_logits_frequency(self):
        rng = Rng(5)
        logits = torch.zeros(100_000, 4, dtype=torch.float64)
        freq = gumbel_softmax(logits, 1.0, rng).mean(dim=0)
        assert float((freq - 0.25).abs().max()) < 0.01

    def test_matches_softmax_distribution(self):
        # total-variation distance against the softmax oracle at temperature 1
        rng = Rng(6)
        logits = torch.tensor([0.3, -0.7, 1.1, 0.0], dtype=torch.float64)
        freq = gumbel_softmax(logits.expand(100_000, 4), 1.0, rng).mean(dim=0)
        tv = 0.5 * float((freq - softmax(logits)).abs().sum())
        assert tv < 0.01

    def test_straight_through_backward_uses_soft_sample(self):
        logits = torch.tensor([0.5, -0.5, 0.1], dtype=torch.float64, requires_grad=True)
        y = gumbel_softmax(logits, 1.0, noise=torch.zeros(3, dtype=torch.float64))
        assert sorted(y.tolist()) == [0.0, 0.0, 1.0]
        y.sum().backward()
        soft = softmax(logits.detach())
        assert logits.grad is not None
        # d(sum(one_hot + y - y.detach()))/dlogits = d(sum softmax)/dlogits = 0
        assert float(logits.grad.abs().max()) < 1e-12
        del soft


class TestReparameterizedSample:
    def test_degenerate_sigma_returns_mu(self):
        mu = torch.tensor([2.0, -3.0], dtype=torch.float64)
        g = DiagonalGaussian(mu=mu, sigma=torch.full_like(mu, 1e-9))
        assert float((reparameterized_sample(g, Rng(0)) - mu).abs().max()) < 1e-6

    def test_moments(self):
        g = DiagonalGaussian(
            mu=torch.zeros(100_000, dtype=torch.float64),
            sigma=torch.ones(100_000, dtype=torch.float64),
        )
        x = reparameterized_sample(g, Rng(1))
        assert abs(float(x.mean())) < 0.02
        assert abs(float(x.var()) - 1.0) < 0.03

    def test_nonpositive_sigma_rejected(self):
        g = DiagonalGaussian(
            mu=torch.zeros(2, dtype=torch.float64),
            sigma=torch.tensor([1.0, 0.0], dtype=torch.float64),
        )
        with pytest.raises(InvariantError):
            reparameterized_sample(g, Rng(0))

    def test_gradient_flows_to_mu_sigma_not_eps(self):
        mu = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        sigma = torch.ones(3, dtype=torch.float64, requires_grad=True)
        eps = Rng(2).normal(3)
        x = reparameterized_sample(DiagonalGaussian(mu, sigma), noise=eps)
        x.sum().backward()
        assert torch.allclose(mu.grad, torch.ones(3, dtype=torch.float64))
        assert torch.allclose(sigma.grad, eps)


class TestGatedRecurrentStep:
    @staticmethod
    def _store(i_dim, h_dim, zeros=False):
        store = ParameterStore(0)
        init = "zeros" if zeros else "orthogonal"
        if zeros:
            store.add("gru.w_ih", (3 * h_dim, i_dim), init="zeros")
            store.add("gru.w_hh", (3 * h_dim, h_dim), init="zeros")
        else:
            store.add("gru.w_ih", (3 * h_dim, i_dim), init=init)
            store.add("gru.w_hh", (3 * h_dim, h_dim), init=init)
        store.add("gru.b_ih", (3 * h_dim,), init="zeros")
        store.add("gru.b_hh", (3 * h_dim,), init="zeros")
        return store

    def test_zero_parameters_halve_hidden(self):
        store = self._store(4, 5, zeros=True)
        h = Rng(1).normal(5)
        out = gated_recurrent_step(Rng(2).normal(4), h, store)
        assert float((out - 0.5 * h).abs().max()) < 1e-12

    def test_output_width_matches_hidden(self):
        store = self._store(3, 7)
        out = gated_recurrent_step(Rng(1).normal(2, 3), Rng(2).normal(2, 7), store)
        assert out.shape == (2, 7)

    def test_deterministic(self):
        store = self._store(3, 4)
        x, h = Rng(5).normal(3), Rng(6).normal(4)
        assert torch.equal(
            gated_recurrent_step(x, h, store), gated_recurrent_step(x, h, store)
        )

    def test_width_mismatch_rejected(self):
        store = self._store(3, 4)
        with pytest.raises(DimensionError):
            gated_recurrent_step(Rng(0).normal(5), Rng(1).normal(4), store)

    def test_gradient_matches_finite_differences(self):
        store = self._store(3, 4)
        x, h = Rng(7).normal(3), Rng(8).normal(4)

        def f(s):
            return (gated_recurrent_step(x, h, s) ** 2).sum()

        f(store).backward()
        fd = finite_difference_gradient(f, store)
        for name in store.names():
            assert rel_err(store[name].grad.numpy(), fd[name]) < 1e-4, name


class TestAdam:
    def test_first_step_moves_by_lr(self):
        store = ParameterStore(0)
        store.add("x", (1,), init="zeros")
        store["x"].grad = torch.ones(1, dtype=torch.float64)
        adam_step(store, lr=5e-4)
        # bias-corrected first step is -lr / (1 + eps), eps = 1e-5
        assert abs(float(store["x"][0]) + 5e-4) < 1e-7

    def test_zero_gradient_fixed_point(self):
        store = ParameterStore(0)
        store.add("x", (2, 2))
        before = store["x"].detach().clone()
        store["x"].grad = torch.zeros(2, 2, dtype=torch.float64)
        adam_step(store)
        assert torch.equal(store["x"].detach(), before)

    def test_missing_gradient_rejected(self):
        store = ParameterStore(0)
        store.add("x", (2,), init="zeros")
        with pytest.raises(StateError):
            adam_step(store)

    def test_grads_zeroed_afterward(self):
        store = ParameterStore(0)
        store.add("x", (2,), init="zeros")
        store["x"].grad = torch.ones(2, dtype=torch.float64)
        adam_step(store)
        assert float(store["x"].grad.abs().max()) == 0.0

    def test_groups_keep_independent_moments(self):
        store = ParameterStore(0)
        store.add("x", (1,), init="zeros")
        store["x"].grad = torch.ones(1, dtype=torch.float64)
        adam_step(store, lr=5e-4, group="a")
        store["x"].grad = torch.ones(1, dtype=torch.float64)
        adam_step(store, lr=5e-4, group="b")
        # both are bias-corrected first steps
        assert abs(float(store["x"][0]) + 2 * 5e-4) < 1e-6


class TestFiniteDifferenceOracle:
    def test_quadratic(self):
        store = ParameterStore(0)
        store.add("x", (1,), init="zeros")
        with torch.no_grad():
            store["x"][0] = 3.0
        fd = finite_difference_gradient(lambda s: float(s["x"][0] ** 2), store)
        assert abs(fd["x"][0] - 6.0) < 1e-6

    def test_constant_function(self):
        store = ParameterStore(0)
        store.add("x", (3,), init="normal")
        fd = finite_difference_gradient(lambda s: 1.0, store)
        assert np.abs(fd["x"]).max() == 0.0

    def test_two_layer_network_cross_check(self):
        store = ParameterStore(3)
        store.add("w1", (5, 4))
        store.add("w2", (2, 5))
        x = Rng(4).normal(4)

        def f(s):
            return (linear(torch.tanh(linear(x, s["w1"])), s["w2"]) ** 2).sum()

        f(store).backward()
        fd = finite_difference_gradient(f, store)
        for name in ("w1", "w2"):
            assert rel_err(store[name].grad.numpy(), fd[name]) < 1e-4


class TestRngAndStore:
    def test_identical_seeds_identical_streams(self):
        a, b = Rng(42, 7), Rng(42, 7)
        assert torch.equal(a.normal(10), b.normal(10))
        assert np.array_equal(a.permutation(20), b.permutation(20))

    def test_spawned_streams_differ(self):
        rng = Rng(0)
        assert not torch.equal(rng.spawn(1).normal(10), rng.spawn(2).normal(10))

    def test_store_deterministic_across_builds(self):
        def build():
            s = ParameterStore(9)
            s.add("a", (4, 4))
            s.add("b", (3,), init="zeros")
            s.add("c", (2, 4), gain=0.01)
            return s

        s1, s2 = build(), build()
        for n in s1.names():
            assert torch.equal(s1[n], s2[n])

    def test_sigma_clamp_bounds(self):
        assert SIGMA_MIN == 1e-3 and SIGMA_MAX == 10.0

    def test_duplicate_name_rejected(self):
        s = ParameterStore(0)
        s.add("a", (2, 2))
        with pytest.raises(StateError):
            s.add("a", (2, 2))

    def test_load_shape_mismatch_rejected(self):
        s = ParameterStore(0)
        s.add("a", (2, 2))
        with pytest.raises(DimensionError):
            s.load_state_dict({"a": np.zeros((3, 3))})
