"""Target density contracts: values against direct oracles, gradients
against finite differences, exact chain evolution."""

import numpy as np
import pytest

from amcmc.targets import (
    BnnPosterior,
    ConfigError,
    DiagonalGaussian,
    FiniteChainTarget,
    GaussianMixture1D,
    chain_evolve_exact,
    gmm_log_density,
    make_reversible_chain,
)
from conftest import central_diff, rel_err


class TestGaussianMixture:
    def test_symmetry_of_default_target(self):
        t = GaussianMixture1D()
        assert t.log_density(-3.0) == pytest.approx(t.log_density(3.0), abs=1e-14)

    def test_gradient_vanishes_at_symmetric_stationary_point(self):
        t = GaussianMixture1D()
        assert t.grad_log_density(np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-14)

    def test_value_at_zero_matches_direct_mixture_sum(self):
        # oracle: sum the two component densities directly at z = 0
        direct = 0.5 * np.exp(-0.5 * 9) / np.sqrt(2 * np.pi) * 2
        t = GaussianMixture1D()
        assert t.log_density(0.0) == pytest.approx(np.log(direct), rel=1e-12)
        # both components equal at 0, so this is log(exp(-4.5)/sqrt(2*pi))
        assert t.log_density(0.0) == pytest.approx(-4.5 - 0.5 * np.log(2 * np.pi), rel=1e-12)

    def test_module_level_helper_agrees(self):
        assert gmm_log_density(1.3) == pytest.approx(GaussianMixture1D().log_density(1.3))

    def test_density_integrates_to_one(self):
        from scipy.integrate import quad

        t = GaussianMixture1D()
        total, _ = quad(lambda z: np.exp(t.log_density(z)), -15, 15, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_batch_methods_agree_with_scalar_path(self, rng):
        t = GaussianMixture1D()
        Z = rng.uniform(-6, 6, (40, 1))
        np.testing.assert_allclose(
            t.log_density_batch(Z), [t.log_density(z) for z in Z], rtol=1e-12
        )
        np.testing.assert_allclose(
            t.grad_log_density_batch(Z),
            np.stack([t.grad_log_density(z) for z in Z]),
            rtol=1e-12,
        )

    def test_invalid_weights_rejected(self):
        with pytest.raises(ConfigError):
            GaussianMixture1D(weights=(0.4, 0.5))


class TestDiagonalGaussian:
    def test_grad_is_linear_pull_to_mean(self):
        t = DiagonalGaussian([1.0, -2.0], [1.0, 0.5])
        np.testing.assert_allclose(
            t.grad_log_density(np.array([2.0, -2.0])), [-1.0, 0.0]
        )

    def test_normalised_value(self):
        t = DiagonalGaussian(0.0, 1.0)
        assert t.log_density(np.zeros(1)) == pytest.approx(-0.5 * np.log(2 * np.pi))


@pytest.mark.parametrize(
    "factory",
    [
        lambda: GaussianMixture1D(),
        lambda: DiagonalGaussian([0.5, -1.0, 2.0], [1.0, 0.3, 2.0]),
    ],
    ids=["gmm", "gaussian"],
)
def test_gradients_match_finite_differences_at_50_points(factory, rng):
    t = factory()
    for _ in range(50):
        z = rng.uniform(-4, 4, t.dim)
        fd = central_diff(lambda v: t.log_density(v), z)
        assert rel_err(t.grad_log_density(z), fd) < 1e-5


class TestBnnPosterior:
    @pytest.fixture
    def data(self, rng):
        X = rng.standard_normal((8, 2))
        y = np.array([0, 1, 0, 1, 1, 0, 1, 0], dtype=float)
        return X, y

    def test_zero_weights_balanced_likelihood(self, data):
        X, y = data
        bnn = BnnPosterior(X, y, hidden=5)
        z = np.zeros(bnn.dim)
        # net output 0 gives sigma = 0.5 for every point
        prior = -0.5 * bnn.dim * np.log(2 * np.pi)
        assert bnn.log_density(z) == pytest.approx(prior + 8 * np.log(0.5), rel=1e-12)

    def test_prior_term_at_zero(self, data):
        X, y = data
        bnn = BnnPosterior(X, y, hidden=5, prior_std=0.7)
        z = np.zeros(bnn.dim)
        expected_prior = -0.5 * bnn.dim * np.log(2 * np.pi * 0.7**2)
        assert bnn.log_density(z) == pytest.approx(
            expected_prior + 8 * np.log(0.5), rel=1e-12
        )

    def test_gradient_matches_finite_differences(self, rng):
        X = rng.standard_normal((3, 2))
        y = np.array([1.0, 0.0, 1.0])
        bnn = BnnPosterior(X, y, hidden=4)
        z = 0.4 * rng.standard_normal(bnn.dim)
        fd = central_diff(bnn.log_density, z)
        assert rel_err(bnn.grad_log_density(z), fd) < 1e-5

    def test_batch_path_matches_tape_path(self, data, rng):
        X, y = data
        bnn = BnnPosterior(X, y, hidden=6)
        Z = 0.5 * rng.standard_normal((4, bnn.dim))
        vals, grads = bnn.value_and_grad_batch(Z)
        np.testing.assert_allclose(vals, [bnn.log_density(z) for z in Z], rtol=1e-12)
        np.testing.assert_allclose(
            grads, np.stack([bnn.grad_log_density(z) for z in Z]), atol=1e-12
        )

    def test_minibatch_rescales_likelihood(self, data):
        X, y = data
        bnn = BnnPosterior(X, y, hidden=5)
        sub = bnn.with_minibatch(np.arange(4))
        z = np.zeros(bnn.dim)
        # zero weights: likelihood is N log(0.5) either way after rescale
        assert sub.log_density(z) == pytest.approx(bnn.log_density(z), rel=1e-12)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            BnnPosterior(np.zeros((0, 2)), np.zeros(0))

    def test_decays_away_from_origin(self, data):
        X, y = data
        bnn = BnnPosterior(X, y, hidden=5)
        rng = np.random.default_rng(0)
        direction = rng.standard_normal(bnn.dim)
        direction /= np.linalg.norm(direction)
        values = [bnn.log_density(r * direction) for r in (10.0, 100.0, 1000.0)]
        assert values[0] > values[1] > values[2]


class TestChainEvolution:
    def test_stationary_vector_is_fixed_point(self, rng):
        chain = make_reversible_chain(4, rng)
        for steps in (1, 3, 10):
            np.testing.assert_allclose(
                chain_evolve_exact(chain.pi, chain.M, steps), chain.pi, atol=1e-12
            )

    def test_zero_steps_is_identity(self):
        M = np.array([[0.9, 0.1], [0.2, 0.8]])
        q = np.array([0.3, 0.7])
        np.testing.assert_array_equal(chain_evolve_exact(q, M, 0), q)

    def test_single_step_by_hand(self):
        # (1, 0) M = first row of M
        M = np.array([[0.9, 0.1], [0.2, 0.8]])
        np.testing.assert_allclose(
            chain_evolve_exact(np.array([1.0, 0.0]), M, 1), [0.9, 0.1], rtol=1e-15
        )

    def test_non_stochastic_matrix_rejected(self):
        with pytest.raises(ConfigError):
            chain_evolve_exact(np.array([0.5, 0.5]), np.array([[0.9, 0.2], [0.2, 0.8]]), 1)

    def test_reversible_chain_construction_invariants(self, rng):
        for _ in range(5):
            chain = make_reversible_chain(5, rng)
            assert np.max(np.abs(chain.M.sum(axis=1) - 1)) < 1e-12
            assert np.max(np.abs(chain.pi @ chain.M - chain.pi)) < 1e-12
            # detailed balance
            flux = chain.pi[:, None] * chain.M
            np.testing.assert_allclose(flux, flux.T, atol=1e-12)

    def test_non_stationary_pi_rejected(self):
        M = np.array([[0.9, 0.1], [0.2, 0.8]])
        with pytest.raises(ConfigError):
            FiniteChainTarget(np.array([0.5, 0.5]), M)
