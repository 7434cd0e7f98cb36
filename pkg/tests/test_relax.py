"""Stochastic relaxations: distributional fidelity, straight-through
gradients, temperature schedule."""
import numpy as np
import pytest
from scipy.stats import chisquare

from patchcomm import relax
from patchcomm import tensor as T
from patchcomm.relax import GumbelConfig, TemperatureSchedule, temperature_at
from patchcomm.tensor import Tensor


class TestGumbel:
    def test_noise_moments(self, rng):
        g = relax.sample_gumbel((200_000,), rng)
        assert g.mean() == pytest.approx(np.euler_gamma, abs=0.01)
        assert g.var() == pytest.approx(np.pi ** 2 / 6, abs=0.03)

    def test_hard_samples_follow_softmax(self, rng):
        logits = Tensor(np.tile(np.array([0.5, -1.0, 0.0, 1.5]), (50_000, 1)))
        out = relax.gumbel_softmax(logits, GumbelConfig(tau_s=0.7, hard=True), rng)
        counts = out.data.argmax(axis=1)
        probs = np.exp(logits.data[0]) / np.exp(logits.data[0]).sum()
        _, p = chisquare(np.bincount(counts, minlength=4), probs * 50_000)
        assert p > 0.001

    def test_hard_output_is_one_hot(self, rng):
        out = relax.gumbel_softmax(Tensor(np.zeros((8, 5))),
                                   GumbelConfig(tau_s=2.0, hard=True), rng)
        np.testing.assert_array_equal(np.sort(out.data, axis=1)[:, :-1], 0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0)

    def test_soft_output_sums_to_one(self, rng):
        out = relax.gumbel_softmax(Tensor(np.zeros((8, 5))),
                                   GumbelConfig(tau_s=0.5, hard=False), rng)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_straight_through_gradient_equals_soft_gradient(self, rng):
        # with frozen noise, hard and soft modes share the backward pass
        logits = np.array([[0.3, -0.2, 0.9]])
        noise = relax.sample_gumbel((1, 3), rng)
        w = Tensor(rng.normal(size=(1, 3)))
        grads = {}
        for hard in (True, False):
            x = Tensor(logits.copy(), requires_grad=True)
            out = relax.gumbel_softmax(x, GumbelConfig(tau_s=1.3, hard=hard),
                                       rng, noise=noise)
            T.tsum(out * w).backward()
            grads[hard] = x.grad
        np.testing.assert_allclose(grads[True], grads[False], atol=1e-12)

    def test_temperature_sharpens_soft_samples(self, rng):
        logits = Tensor(np.array([[1.0, 0.0, -1.0]]))
        noise = relax.sample_gumbel((1, 3), rng)
        hot = relax.gumbel_softmax(logits, GumbelConfig(5.0, False), rng, noise=noise)
        cold = relax.gumbel_softmax(logits, GumbelConfig(0.1, False), rng, noise=noise)
        assert cold.data.max() > hot.data.max()

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            GumbelConfig(tau_s=0.0, hard=True)


class TestBernoulli:
    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_hard_mean_matches_p(self, rng, p):
        draws = relax.bernoulli_relaxed(Tensor(np.full(100_000, p)),
                                        GumbelConfig(tau_s=3.0, hard=True), rng)
        assert draws.data.mean() == pytest.approx(p, abs=0.01)

    def test_hard_output_is_binary(self, rng):
        out = relax.bernoulli_relaxed(Tensor(np.full(50, 0.4)),
                                      GumbelConfig(tau_s=1.0, hard=True), rng)
        assert set(np.unique(out.data)) <= {0.0, 1.0}

    def test_soft_output_in_unit_interval(self, rng):
        out = relax.bernoulli_relaxed(Tensor(np.full(50, 0.4)),
                                      GumbelConfig(tau_s=1.0, hard=False), rng)
        assert np.all(out.data > 0) and np.all(out.data < 1)

    def test_mean_independent_of_temperature(self, rng):
        # logistic-noise thresholding is exact for any tau
        for tau in (0.2, 1.0, 5.0):
            draws = relax.bernoulli_relaxed(Tensor(np.full(50_000, 0.3)),
                                            GumbelConfig(tau_s=tau, hard=True), rng)
            assert draws.data.mean() == pytest.approx(0.3, abs=0.015)

    def test_gradient_flows_to_probabilities(self, rng):
        p = Tensor(np.full(6, 0.6), requires_grad=True)
        noise = relax.sample_logistic((6,), rng)
        out = relax.bernoulli_relaxed(p, GumbelConfig(tau_s=1.0, hard=True),
                                      rng, noise=noise)
        T.tsum(out).backward()
        assert p.grad is not None and np.all(p.grad != 0)

    def test_rejects_out_of_range_probability(self, rng):
        with pytest.raises(ValueError):
            relax.bernoulli_relaxed(Tensor(np.array([1.5])),
                                    GumbelConfig(tau_s=1.0, hard=True), rng)


class TestSchedule:
    def test_endpoints(self):
        sched = TemperatureSchedule(5.0, 1.0, 50)
        assert temperature_at(0, sched) == pytest.approx(5.0)
        assert temperature_at(50, sched) == pytest.approx(1.0)
        assert temperature_at(500, sched) == pytest.approx(1.0)

    def test_monotone_non_increasing(self):
        sched = TemperatureSchedule(5.0, 1.0, 50)
        taus = [temperature_at(e, sched) for e in range(60)]
        assert all(a >= b for a, b in zip(taus, taus[1:]))

    def test_rejects_end_above_start(self):
        with pytest.raises(ValueError):
            TemperatureSchedule(1.0, 5.0, 50)
