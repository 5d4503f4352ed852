"""Probability kernels, moments and domain types."""

import numpy as np
import pytest
from helpers import (
    bb_quadrature,
    compositions,
    gaussian_logpdf_direct,
    two_pass_correlation,
)

import labelembed as le
from labelembed.model import GridSpec, chol_with_jitter


class TestBetaBinomialMarginal:
    def test_uniform_case(self):
        # alpha = beta = 1 makes the marginal uniform over {0..J}
        assert le.log_beta_binomial_marginal(3, 10, (0.0, 0.0)) == pytest.approx(
            np.log(1 / 11), abs=1e-12
        )

    def test_single_draw(self):
        assert le.log_beta_binomial_marginal(1, 1, (0.0, 0.0)) == pytest.approx(
            np.log(0.5), abs=1e-12
        )

    def test_matches_quadrature(self):
        val = le.log_beta_binomial_marginal(2, 5, (1.0, -0.5))
        oracle = bb_quadrature(2, 5, (1.0, -0.5))
        assert np.exp(val) == pytest.approx(oracle, abs=1e-8)

    def test_quadrature_random_sweep(self, rng):
        for _ in range(25):
            J = int(rng.integers(1, 40))
            y = int(rng.integers(0, J + 1))
            z = rng.uniform(-2, 2, 2)
            assert np.exp(le.log_beta_binomial_marginal(y, J, z)) == pytest.approx(
                bb_quadrature(y, J, z), abs=1e-8
            )

    def test_normalizes(self, rng):
        for _ in range(50):
            J = int(rng.integers(1, 101))
            z = rng.uniform(-3, 3, 2)
            total = sum(
                np.exp(le.log_beta_binomial_marginal(y, J, z)) for y in range(J + 1)
            )
            assert total == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize(
        "y,J,z",
        [
            (5, 4, (0.0, 0.0)),
            (-1, 4, (0.0, 0.0)),
            (0, 0, (0.0, 0.0)),
            (1, 2, (np.inf, 0.0)),
            (1, 2, (np.nan, 0.0)),
        ],
    )
    def test_domain_errors(self, y, J, z):
        with pytest.raises(le.DomainError):
            le.log_beta_binomial_marginal(y, J, z)

    def test_clamp_counter(self):
        le.clamp_events.reset()
        le.log_beta_binomial_marginal(1, 2, (40.0, 0.0))
        assert le.clamp_events.count == 1


class TestDirichletMultinomialMarginal:
    def test_uniform_case(self):
        # a unit concentration vector is uniform over count vectors
        assert le.log_dirichlet_multinomial_marginal(
            (1, 1, 0), (0.0, 0.0, 0.0)
        ) == pytest.approx(np.log(1 / 6), abs=1e-12)

    def test_reduces_to_beta_binomial(self, rng):
        for _ in range(300):
            J = int(rng.integers(1, 80))
            y = int(rng.integers(0, J + 1))
            z = rng.uniform(-3, 3, 2)
            dm = le.log_dirichlet_multinomial_marginal((y, J - y), z)
            bb = le.log_beta_binomial_marginal(y, J, z)
            assert dm == pytest.approx(bb, abs=1e-12)

    def test_matches_forward_simulation(self):
        # oracle: simulate (pi, Y) from the generative model and compare
        # the empirical pmf of one count vector with the marginal
        rng = np.random.default_rng(5)
        z = np.array([0.5, 0.0, -1.0])
        n_sim = 1_000_000
        pis = rng.dirichlet(np.exp(z), size=n_sim)
        draws = rng.multinomial(5, pis)
        hit = np.all(draws == np.array([3, 1, 1]), axis=1)
        p_hat = hit.mean()
        se = np.sqrt(p_hat * (1 - p_hat) / n_sim)
        p_model = np.exp(le.log_dirichlet_multinomial_marginal((3, 1, 1), z))
        assert abs(p_model - p_hat) < 3 * se

    def test_normalizes_over_compositions(self, rng):
        for K in (2, 3, 4):
            for J in (1, 3, 6):
                z = rng.uniform(-2, 2, K)
                total = sum(
                    np.exp(le.log_dirichlet_multinomial_marginal(y, z))
                    for y in compositions(J, K)
                )
                assert total == pytest.approx(1.0, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(le.DomainError):
            le.log_dirichlet_multinomial_marginal((1, 1, 1), (0.0, 0.0))


class TestLogPosterior:
    def test_zero_quadratic_form_at_mean(self):
        K, c = 3, 4.0
        mu = np.array([0.3, -0.2, 0.1])
        prior = le.GaussianPrior(mu, c * np.eye(K))
        y = (2, 1, 3)
        val = le.log_posterior(mu, y, prior)
        expected = le.log_dirichlet_multinomial_marginal(y, mu) - 0.5 * K * np.log(
            2 * np.pi * c
        )
        assert val == pytest.approx(expected, abs=1e-12)

    def test_matches_direct_density(self, rng):
        mu = np.zeros(3)
        sigma = 10.0 * np.eye(3)
        prior = le.GaussianPrior(mu, sigma)
        z = np.zeros(3)
        expected = le.log_dirichlet_multinomial_marginal(
            (1, 1, 0), z
        ) + gaussian_logpdf_direct(z, mu, sigma)
        assert le.log_posterior(z, (1, 1, 0), prior) == pytest.approx(
            expected, abs=1e-10
        )
        for _ in range(20):
            z = rng.uniform(-2, 2, 3)
            expected = le.log_dirichlet_multinomial_marginal(
                (4, 2, 1), z
            ) + gaussian_logpdf_direct(z, mu, sigma)
            assert le.log_posterior(z, (4, 2, 1), prior) == pytest.approx(
                expected, abs=1e-10
            )

    def test_differences_drop_constants(self, rng):
        prior = le.GaussianPrior(np.zeros(3), 2.0 * np.eye(3))
        y = (3, 3, 4)
        z1, z2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        diff = le.log_posterior(z1, y, prior) - le.log_posterior(z2, y, prior)
        bare = (
            le.log_dirichlet_multinomial_marginal(y, z1)
            - le.log_dirichlet_multinomial_marginal(y, z2)
            + gaussian_logpdf_direct(z1, prior.mu, prior.sigma)
            - gaussian_logpdf_direct(z2, prior.mu, prior.sigma)
        )
        assert diff == pytest.approx(bare, abs=1e-10)


class TestDirichletMoments:
    def test_symmetric_case(self):
        m = le.dirichlet_moments(np.zeros(4))
        assert np.allclose(m.mean, 0.25, atol=1e-15)
        assert np.allclose(np.diag(m.cov), 0.25 * 0.75 / 5.0, atol=1e-12)

    def test_k2_closed_form(self):
        m = le.dirichlet_moments((np.log(2.0), 0.0))
        assert m.mean == pytest.approx([2 / 3, 1 / 3], abs=1e-14)
        assert m.cov[0, 0] == pytest.approx(1 / 18, abs=1e-14)

    def test_matches_sampled_moments(self):
        rng = np.random.default_rng(11)
        z = rng.uniform(-1.5, 1.5, 5)
        alpha = np.exp(z)
        n_sim = 1_000_000
        draws = rng.dirichlet(alpha, size=n_sim)
        m = le.dirichlet_moments(z)
        se_mean = draws.std(axis=0) / np.sqrt(n_sim)
        assert np.all(np.abs(draws.mean(axis=0) - m.mean) < 3 * se_mean)
        centered = draws - m.mean
        for i in range(5):
            for j in range(i, 5):
                prod = centered[:, i] * centered[:, j]
                se = prod.std() / np.sqrt(n_sim)
                assert abs(prod.mean() - m.cov[i, j]) < 3 * se

    def test_mean_is_softmax(self, rng):
        z = rng.uniform(-4, 4, 6)
        e = np.exp(z - z.max())
        assert np.array_equal(le.dirichlet_moments(z).mean, e / e.sum())

    def test_cov_structure(self, rng):
        for _ in range(20):
            z = rng.uniform(-3, 3, 5)
            cov = le.dirichlet_moments(z).cov
            assert np.allclose(cov, cov.T, atol=1e-12)
            assert np.all(np.abs(cov.sum(axis=1)) < 1e-10)
            assert np.all(np.linalg.eigvalsh(cov) > -1e-10)
            assert np.all(np.diag(cov) > 0)

    def test_shift_leaves_mean_moves_cov(self):
        # dyadic entries keep z + c exact, so the softmax is bit-identical
        rng = np.random.default_rng(3)
        z = rng.integers(-8, 8, size=5) / 8.0
        for c in (0.5, 1.0, 2.0):
            a = le.dirichlet_moments(z)
            b = le.dirichlet_moments(z + c)
            assert np.array_equal(a.mean, b.mean)
            assert np.trace(b.cov) < np.trace(a.cov)


class TestBetaMoments:
    def test_flat_case(self):
        m = le.beta_moments((0.0, 0.0))
        assert m.mean == 0.5
        assert m.variance == pytest.approx(1 / 12, abs=1e-12)
        assert m.log_variance == pytest.approx(np.log(1 / 12), abs=1e-12)

    def test_equal_entries_give_half(self, rng):
        for t in rng.uniform(-20, 20, 50):
            assert le.beta_moments((t, t)).mean == 0.5

    def test_matches_sampled_variance(self):
        rng = np.random.default_rng(23)
        m = le.beta_moments((2.0, -2.0))
        assert m.mean == pytest.approx(np.exp(2) / (np.exp(2) + np.exp(-2)), abs=1e-12)
        draws = rng.beta(np.exp(2.0), np.exp(-2.0), size=1_000_000)
        sample_var = draws.var()
        # variance of the sample variance, via the fourth central moment
        m4 = ((draws - draws.mean()) ** 4).mean()
        se = np.sqrt((m4 - sample_var**2) / draws.size)
        assert abs(m.variance - sample_var) < 3 * se

    def test_consistent_with_dirichlet(self, rng):
        for _ in range(100):
            z = rng.uniform(-3, 3, 2)
            bm = le.beta_moments(z)
            dm = le.dirichlet_moments(z)
            assert abs(bm.mean - dm.mean[0]) < 1e-14
            assert abs(bm.variance - dm.cov[0, 0]) < 1e-14


class TestMomentSurface:
    def test_contains_origin_row(self):
        table = le.moment_surface(GridSpec(-3, 3, 0.1), GridSpec(-3, 3, 0.1))
        assert table.shape == (3721, 4)
        at_origin = table[(table[:, 0] == 0.0) & (table[:, 1] == 0.0)]
        assert at_origin.shape[0] == 1
        assert at_origin[0, 2] == 0.5
        assert at_origin[0, 3] == pytest.approx(np.log(1 / 12), abs=1e-12)

    def test_swap_antisymmetry(self):
        table = le.moment_surface(GridSpec(-2, 2, 0.25), GridSpec(-2, 2, 0.25))
        means = {(row[0], row[1]): row[2] for row in table}
        for (z1, z2), m in means.items():
            assert m == pytest.approx(1.0 - means[(z2, z1)], abs=1e-12)

    def test_mean_increases_in_z1(self):
        table = le.moment_surface(GridSpec(-3, 3, 0.2), GridSpec(-3, 3, 0.2))
        n2 = np.unique(table[:, 1]).size
        grid = table[:, 2].reshape(-1, n2)
        assert np.all(np.diff(grid, axis=0) > 0)

    def test_empty_grid_errors(self):
        with pytest.raises(le.DomainError):
            le.moment_surface(GridSpec(1.0, 0.0, 0.1), GridSpec(0, 1, 0.1)).shape
        with pytest.raises(le.DomainError):
            GridSpec(0, 1, -0.1).values()

    def test_parse(self):
        spec = GridSpec.parse("-3:3:0.1")
        assert (spec.start, spec.stop, spec.step) == (-3.0, 3.0, 0.1)
        with pytest.raises(le.DomainError):
            GridSpec.parse("1:2")
        with pytest.raises(le.DomainError):
            GridSpec.parse("a:b:c")


class TestGaussianPrior:
    def test_jitter_recovers_singular_scatter(self):
        prior = le.GaussianPrior(np.zeros(2), np.array([[1.0, 0.0], [0.0, 0.0]]))
        eig = np.linalg.eigvalsh(prior.sigma)
        assert eig.min() > 0
        assert prior.sigma[0, 0] == pytest.approx(1.0, abs=1e-7)

    def test_rejects_asymmetry(self):
        with pytest.raises(le.DomainError):
            le.GaussianPrior(np.zeros(2), np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_unrecoverable_matrix_raises(self):
        with pytest.raises(le.NumericalError):
            chol_with_jitter(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_logpdf_matches_direct(self, rng):
        A = rng.standard_normal((3, 3))
        sigma = A @ A.T + 0.5 * np.eye(3)
        mu = rng.standard_normal(3)
        prior = le.GaussianPrior(mu, sigma)
        for _ in range(20):
            z = rng.standard_normal(3)
            assert prior.logpdf(z) == pytest.approx(
                gaussian_logpdf_direct(z, mu, sigma), abs=1e-10
            )


class TestDomainTypes:
    def test_class_labels_validation(self):
        with pytest.raises(le.DomainError):
            le.ClassLabels(["only"])
        with pytest.raises(le.DomainError):
            le.ClassLabels(["a", "a"])
        labels = le.ClassLabels(["x", "y", "z"])
        assert labels.K == 3
        assert labels.index("y") == 1
        with pytest.raises(le.DomainError):
            labels.index("w")

    def test_vote_counts_validation(self):
        vc = le.VoteCounts((2, 0, 3))
        assert vc.J == 5 and vc.K == 3
        with pytest.raises(le.DomainError):
            le.VoteCounts((0, 0, 0))
        with pytest.raises(le.DomainError):
            le.VoteCounts((-1, 2, 1))
        with pytest.raises(le.DomainError):
            le.VoteCounts((1.5, 2.0, 1.0))
        assert le.VoteCounts((1.0, 2.0, 0.0)).J == 3  # integral floats accepted

    def test_dataset_validation(self):
        labels = le.ClassLabels(["a", "b"])
        inst = le.Instance("x", le.VoteCounts((1, 2)))
        with pytest.raises(le.DomainError):
            le.AnnotationDataset(labels, [])
        with pytest.raises(le.DomainError):
            le.AnnotationDataset(labels, [inst, inst])
        with pytest.raises(le.DomainError):
            le.AnnotationDataset(
                labels, [le.Instance("y", le.VoteCounts((1, 2, 3)))]
            )
        ds = le.AnnotationDataset(labels, [inst])
        assert ds.counts_matrix().tolist() == [[1, 2]]


def test_two_pass_correlation_helper_consistency(rng):
    # guard the oracle itself against drift: it must agree with numpy
    X = rng.standard_normal((50, 4))
    assert np.allclose(two_pass_correlation(X), np.corrcoef(X, rowvar=False), atol=1e-12)
