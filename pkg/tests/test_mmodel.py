"""Bartlett parameterisation, hyperprior density and Kronecker precision."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from _oracles import dense_laplacian, log_hyperprior
from mdmap.errors import NumericalError
from mdmap.graph import build_graph, cycle_graph, lattice_graph, path_graph, structure_matrix
from mdmap.mmodel import (
    BetweenDiseaseCov,
    HyperState,
    assemble_precision,
    bartlett_cov,
    bartlett_factor,
    bartlett_invert,
    cov_from_correlations,
    grad_log_prior_hyper,
    log_prior_hyper,
    n_hyper,
    offdiag_pairs,
)


def random_spd(J, rng):
    X = rng.normal(size=(J, J + 3))
    return X @ X.T / (J + 3) + 0.05 * np.eye(J)


class TestHyperState:
    def test_lengths(self):
        assert [n_hyper(J) for J in (1, 2, 3, 4)] == [1, 3, 6, 10]
        assert offdiag_pairs(3) == [(1, 0), (2, 0), (2, 1)]

    def test_default_dof(self):
        assert HyperState.zeros(3).dof == 5.0
        assert HyperState.zeros(3, dof=7).dof == 7.0

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            HyperState([0.0, 0.0], 2)

    def test_immutable_theta(self):
        h = HyperState.zeros(2)
        with pytest.raises(ValueError):
            h.theta[0] = 1.0


class TestBartlett:
    def test_identity(self):
        c = bartlett_cov(HyperState.zeros(2))
        np.testing.assert_array_equal(c.cov, np.eye(2))
        assert c.rho[0, 1] == 0.0
        np.testing.assert_array_equal(c.sigma2, [1.0, 1.0])

    def test_hand_example(self):
        h = HyperState([np.log(2.0), 0.0, 1.0], 2)
        np.testing.assert_allclose(bartlett_factor(h), [[2, 0], [1, 1]], rtol=0, atol=1e-15)
        c = bartlett_cov(h)
        np.testing.assert_allclose(c.cov, [[4, 2], [2, 2]], rtol=1e-15)
        np.testing.assert_allclose(c.rho[0, 1], 2 / np.sqrt(8), rtol=1e-15)

    def test_invert_hand_example(self):
        h = bartlett_invert(np.array([[4.0, 2.0], [2.0, 2.0]]))
        np.testing.assert_allclose(h.theta, [np.log(2.0), 0.0, 1.0], atol=1e-15)

    def test_invert_identity(self):
        np.testing.assert_array_equal(bartlett_invert(np.eye(3)).theta, np.zeros(6))

    def test_scenario1_round_trip(self):
        target = cov_from_correlations([0.25, 0.16, 0.09], [0.7, 0.5, 0.1])
        back = bartlett_cov(bartlett_invert(target))
        np.testing.assert_allclose(back.cov, target.cov, rtol=1e-10)
        np.testing.assert_allclose(back.sigma2, [0.25, 0.16, 0.09], rtol=1e-12)
        np.testing.assert_allclose(back.correlations(), [0.7, 0.5, 0.1], rtol=1e-12)

    @pytest.mark.parametrize("J", [1, 2, 3, 4, 6])
    def test_random_spd_round_trip(self, J):
        rng = np.random.default_rng(J)
        for _ in range(50):
            cov = random_spd(J, rng)
            back = bartlett_cov(bartlett_invert(cov)).cov
            assert np.max(np.abs(back - cov)) / np.max(np.abs(cov)) < 1e-10

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31))
    def test_theta_round_trip_and_spd(self, J, seed):
        theta = np.random.default_rng(seed).normal(scale=1.5, size=n_hyper(J))
        h = HyperState(theta, J)
        c = bartlett_cov(h)
        assert np.linalg.eigvalsh(c.cov).min() > 0
        assert np.all(np.abs(c.rho) <= 1 + 1e-12)
        back = bartlett_invert(c)
        # backward stable for any draw
        rebuilt = bartlett_cov(back).cov
        assert np.max(np.abs(rebuilt - c.cov)) / np.max(np.abs(c.cov)) < 1e-12
        # forward error of the Cholesky factor grows with cond(cov)
        atol = 1e-10 * (1 + np.abs(theta).max()) * max(1.0, np.linalg.cond(c.cov) / 1e8)
        np.testing.assert_allclose(back.theta, theta, rtol=0, atol=atol)

    def test_theta_round_trip_ill_conditioned(self):
        theta = np.random.default_rng(67728614).normal(scale=1.5, size=n_hyper(5))
        c = bartlett_cov(HyperState(theta, 5))
        assert np.linalg.cond(c.cov) > 1e11
        np.testing.assert_allclose(bartlett_invert(c).theta, theta, rtol=0, atol=1e-8)

    def test_overflow_raises(self):
        with pytest.raises(NumericalError):
            bartlett_cov(HyperState([800.0, 0.0, 0.0], 2))

    def test_invert_non_spd(self):
        with pytest.raises(NumericalError):
            bartlett_invert(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_correlation_builder_rejects_indefinite(self):
        with pytest.raises(NumericalError):
            cov_from_correlations([1, 1, 1], [0.9, -0.9, 0.9])

    def test_from_cov_requires_positive_variance(self):
        with pytest.raises(NumericalError):
            BetweenDiseaseCov.from_cov([[0.0, 0.0], [0.0, 1.0]])


class TestHyperprior:
    def test_reference_point(self):
        # 2 log 2 + log f_chi2_4(1) + log f_chi2_3(1) + log phi(0), independent densities
        expected = 2 * np.log(2) + stats.chi2.logpdf(1, 4) + stats.chi2.logpdf(1, 3) + stats.norm.logpdf(0)
        assert log_prior_hyper(HyperState.zeros(2)) == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("J", [1, 2, 3, 4])
    def test_matches_scipy_oracle(self, J):
        rng = np.random.default_rng(10 + J)
        for _ in range(20):
            theta = rng.normal(scale=0.8, size=n_hyper(J))
            assert log_prior_hyper(HyperState(theta, J)) == pytest.approx(log_hyperprior(theta, J), rel=1e-12, abs=1e-12)

    def test_dof_override(self):
        theta = np.array([0.3, -0.2, 0.5])
        assert log_prior_hyper(HyperState(theta, 2, dof=9)) == pytest.approx(log_hyperprior(theta, 2, dof=9), rel=1e-12)

    def test_offdiag_translation(self):
        theta = np.array([0.1, -0.3, 0.4, 0.2, -0.7, 1.1])
        d = 0.37
        shifted = theta.copy()
        shifted[4] += d
        diff = log_prior_hyper(HyperState(shifted, 3)) - log_prior_hyper(HyperState(theta, 3))
        expected = stats.norm.logpdf(theta[4] + d) - stats.norm.logpdf(theta[4])
        assert diff == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("bad", [np.inf, -np.inf, 400.0])
    def test_extreme_diagonal_is_minus_inf(self, bad):
        with np.errstate(all="raise"):
            v = log_prior_hyper(HyperState([bad, 0.0, 0.0], 2))
        assert v == -np.inf

    def test_tiny_scale_is_finite(self):
        with np.errstate(all="raise"):
            v = log_prior_hyper(HyperState([-1e6, 0.0, 0.0], 2))
        assert np.isfinite(v) and v < -1e6

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(0)
        h = 1e-5
        worst = 0.0
        for _ in range(100):
            J = int(rng.integers(1, 5))
            theta = rng.normal(scale=0.7, size=n_hyper(J))
            g = grad_log_prior_hyper(HyperState(theta, J))
            fd = np.empty_like(theta)
            for k in range(theta.size):
                e = np.zeros_like(theta)
                e[k] = h
                fd[k] = (log_prior_hyper(HyperState(theta + e, J)) - log_prior_hyper(HyperState(theta - e, J))) / (2 * h)
            worst = max(worst, np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1.0)))
        assert worst < 1e-5


class TestAssemblePrecision:
    def test_scalar_cov(self):
        s = structure_matrix(path_graph(4))
        P = assemble_precision(BetweenDiseaseCov.from_cov([[1.0]]), s, 1)
        np.testing.assert_array_equal(P.matrix.toarray(), s.Q.toarray())

    def test_identity_block_diagonal(self):
        s = structure_matrix(path_graph(3))
        P = assemble_precision(BetweenDiseaseCov.from_cov(np.eye(2)), s).matrix.toarray()
        Q = s.Q.toarray()
        np.testing.assert_array_equal(P[:3, :3], Q)
        np.testing.assert_array_equal(P[3:, 3:], Q)
        np.testing.assert_array_equal(P[:3, 3:], 0)

    @pytest.mark.parametrize(
        "graph",
        [path_graph(3), cycle_graph(5), lattice_graph(2, 3), build_graph([("a", "b")], ["a", "b", "c", "d"])],
        ids=["path3", "cycle5", "lattice2x3", "disconnected"],
    )
    def test_dense_kronecker_oracle(self, graph):
        cov = np.array([[4.0, 2.0], [2.0, 2.0]])
        s = structure_matrix(graph)
        P = assemble_precision(BetweenDiseaseCov.from_cov(cov), s).matrix.toarray()
        Qd = dense_laplacian(graph.n_areas, graph.edges.tolist())
        expected = np.kron(np.linalg.inv(cov), Qd)
        assert np.max(np.abs(P - expected)) < 1e-12

    def test_constraint_rows(self):
        g = build_graph([("a", "b"), ("c", "d")], ["a", "b", "c", "d", "e"])
        P = assemble_precision(BetweenDiseaseCov.from_cov(np.eye(2)), structure_matrix(g))
        C = P.constraints.toarray()
        assert C.shape == (6, 10)
        np.testing.assert_array_equal(C.sum(axis=0), np.ones(10))
        np.testing.assert_array_equal(C[0], [1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(C[5], [0, 0, 0, 0, 0, 0, 0, 0, 0, 1])

    @pytest.mark.parametrize("seed", range(8))
    def test_null_space_dimension(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 21))
        iu = np.triu_indices(n, 1)
        keep = rng.random(iu[0].size) < rng.uniform(0.05, 0.4)
        g = build_graph([(str(a), str(b)) for a, b in zip(iu[0][keep], iu[1][keep])], [str(i) for i in range(n)])
        s = structure_matrix(g)
        J = int(rng.integers(1, 4))
        P = assemble_precision(BetweenDiseaseCov.from_cov(random_spd(J, rng)), s).matrix.toarray()
        lam = np.linalg.eigvalsh(P)
        assert np.sum(np.abs(lam) < 1e-8) == J * s.n_components
        assert lam.min() > -1e-8

    def test_singular_cov(self):
        with pytest.raises(NumericalError):
            assemble_precision(BetweenDiseaseCov.from_cov([[1.0, 1.0], [1.0, 1.0]]), structure_matrix(path_graph(3)))
