"""Forward generative sampler and recovery scoring."""

import numpy as np
import pytest
from helpers import compositions, softmax, tv_distance

import labelembed as le
from labelembed.em import FitResult
from labelembed.simulate import _dirichlet


def _fit_result_with(embeddings, mu):
    """Minimal FitResult stub for scoring tests."""
    Z = np.asarray(embeddings, float)
    n, K = Z.shape
    return FitResult(
        instance_ids=tuple(f"i{j}" for j in range(n)),
        embeddings=Z,
        final_prior=le.GaussianPrior(mu, np.eye(K)),
        per_instance_cov=np.tile(np.eye(K), (n, 1, 1)),
        final_draws=(),
        history=(),
        iterations_run=1,
        converged=True,
    )


class TestSampleDataset:
    def test_reproducible(self):
        prior = le.GaussianPrior(np.zeros(3), np.eye(3))
        spec = le.SimSpec(n=25, K=3, J=7, prior=prior, seed=123)
        ds1, z1 = le.sample_dataset(spec)
        ds2, z2 = le.sample_dataset(spec)
        assert np.array_equal(z1, z2)
        assert np.array_equal(ds1.counts_matrix(), ds2.counts_matrix())

    def test_near_degenerate_prior_gives_unanimity(self):
        mu = np.full(4, -10.0)
        mu[1] = 10.0
        prior = le.GaussianPrior(mu, 1e-12 * np.eye(4))
        ds, _ = le.sample_dataset(le.SimSpec(n=400, K=4, J=100, prior=prior, seed=1))
        counts = ds.counts_matrix()
        unanimous = (counts.max(axis=1) == counts.sum(axis=1)).mean()
        assert unanimous > 0.99
        assert np.all(counts.argmax(axis=1) == 1)

    def test_symmetric_prior_balances_classes(self):
        prior = le.GaussianPrior(np.zeros(3), 10.0 * np.eye(3))
        ds, true_z = le.sample_dataset(
            le.SimSpec(n=10_000, K=3, J=100, prior=prior, seed=5)
        )
        sm = np.exp(true_z - true_z.max(axis=1, keepdims=True))
        sm /= sm.sum(axis=1, keepdims=True)
        se = sm.std(axis=0) / np.sqrt(len(sm))
        assert np.all(np.abs(sm.mean(axis=0) - 1 / 3) < 3 * se)

    def test_per_instance_j(self):
        prior = le.GaussianPrior(np.zeros(2), np.eye(2))
        js = [3, 10, 1, 8]
        ds, _ = le.sample_dataset(le.SimSpec(n=4, K=2, J=js, prior=prior, seed=2))
        assert [i.votes.J for i in ds.instances] == js

    def test_marginal_matches_kernel(self):
        # empirical pmf over all compositions (K=3, J=4) for one fixed
        # embedding agrees with the closed-form marginal
        rng = np.random.default_rng(77)
        z = np.array([0.4, -0.3, 0.1])
        n_sim = 1_000_000
        pis = rng.dirichlet(np.exp(z), size=n_sim)
        draws = rng.multinomial(4, pis)
        comps = list(compositions(4, 3))
        keys = {c: i for i, c in enumerate(comps)}
        idx = np.array([keys[tuple(row)] for row in draws])
        freq = np.bincount(idx, minlength=len(comps)) / n_sim
        for c, f in zip(comps, freq):
            p = np.exp(le.log_dirichlet_multinomial_marginal(c, z))
            se = np.sqrt(p * (1 - p) / n_sim)
            assert abs(f - p) < 3 * se + 1e-12

    def test_class_exchangeability_distributional(self):
        # permuting the prior mean permutes the count distribution
        mu = np.array([1.0, 0.0, -1.0])
        prior_a = le.GaussianPrior(mu, np.eye(3))
        prior_b = le.GaussianPrior(mu[[2, 0, 1]], np.eye(3))
        ds_a, _ = le.sample_dataset(le.SimSpec(n=4000, K=3, J=20, prior=prior_a, seed=8))
        ds_b, _ = le.sample_dataset(le.SimSpec(n=4000, K=3, J=20, prior=prior_b, seed=9))
        mean_a = ds_a.counts_matrix().mean(axis=0)
        mean_b = ds_b.counts_matrix().mean(axis=0)
        sd = ds_a.counts_matrix().std(axis=0) / np.sqrt(4000)
        assert np.all(np.abs(mean_a[[2, 0, 1]] - mean_b) < 4 * np.maximum(sd, 0.05))

    def test_tiny_concentration_falls_back_to_vertex(self):
        rng = np.random.default_rng(0)
        alpha = np.full(3, 1e-300)  # guaranteed underflow of the gamma draws
        pi = _dirichlet(rng, alpha)
        assert pi.sum() == pytest.approx(1.0)
        assert np.count_nonzero(pi) == 1

    def test_spec_validation(self):
        prior = le.GaussianPrior(np.zeros(2), np.eye(2))
        with pytest.raises(le.DomainError):
            le.SimSpec(n=0, K=2, J=5, prior=prior)
        with pytest.raises(le.DomainError):
            le.SimSpec(n=3, K=3, J=5, prior=prior)
        with pytest.raises(le.DomainError):
            le.SimSpec(n=3, K=2, J=[1, 2], prior=prior)
        with pytest.raises(le.DomainError):
            le.SimSpec(n=2, K=2, J=[1, 0], prior=prior)


class TestRecoveryScore:
    def test_perfect_fit_scores_zero(self, rng):
        Z = rng.standard_normal((12, 3))
        fitted = _fit_result_with(Z, Z.mean(axis=0))
        rmse, tv = le.recovery_score(Z, fitted)
        assert rmse == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(tv, 0.0, atol=1e-12)

    def test_common_shift_leaves_tv_zero(self, rng):
        Z = rng.standard_normal((10, 4))
        c = 1.7
        fitted = _fit_result_with(Z + c, (Z + c).mean(axis=0))
        rmse, tv = le.recovery_score(Z, fitted)
        assert np.allclose(tv, 0.0, atol=1e-12)
        assert rmse == pytest.approx(c, abs=1e-10)

    def test_shape_mismatch(self, rng):
        Z = rng.standard_normal((5, 3))
        fitted = _fit_result_with(Z, Z.mean(axis=0))
        with pytest.raises(le.DomainError):
            le.recovery_score(rng.standard_normal((6, 3)), fitted)

    def test_tv_tracks_softmax_gap(self):
        truth = np.array([[2.0, 0.0, -2.0]])
        wrong = np.array([[0.0, 0.0, 0.0]])
        fitted = _fit_result_with(wrong, wrong[0])
        _, tv = le.recovery_score(truth, fitted)
        assert tv[0] == pytest.approx(
            tv_distance(softmax(truth[0]), softmax(wrong[0])), abs=1e-12
        )
