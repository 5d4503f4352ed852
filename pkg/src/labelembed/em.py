"""Stochastic EM fitting of the empirical-Bayes Gaussian prior.

Each iteration draws per-instance MCMC samples of the embedding from the
current posterior (E-step), averages them into point estimates, and
re-estimates the prior mean and covariance from those estimates (M-step).
Instances sharing an annotation pattern share one chain; the E-step is a
parallel map over patterns and the merge order is fixed by pattern index,
so results do not depend on the worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

from .model import (
    AnnotationDataset,
    DomainError,
    GaussianPrior,
    NumericalError,
    VoteCounts,
    Z_CLAMP,
    clamp_events,
)
from .sampler import (
    McmcConfig,
    PosteriorDraws,
    derive_seed,
    posterior_covariance,
    posterior_mean,
    rw_metropolis_batch,
)

log = logging.getLogger("labelembed.em")

M_STEP_MODES = ("paper", "full-draws")


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 50
    rel_tol: float = 1e-3
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    min_iterations: int = 5
    m_step: str = "paper"

    def __post_init__(self):
        if self.min_iterations < 0:
            raise DomainError("min_iterations must be >= 0")
        if self.max_iterations < max(self.min_iterations, 1):
            raise DomainError("max_iterations must be >= min_iterations and >= 1")
        if not (self.rel_tol > 0):
            raise DomainError("rel_tol must be > 0")
        if self.m_step not in M_STEP_MODES:
            raise DomainError(f"m_step must be one of {M_STEP_MODES}")


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mu: np.ndarray
    sigma_frobenius: float
    mean_acceptance: float


@dataclass(frozen=True)
class FitResult:
    """Fitted embeddings plus the final prior and run diagnostics."""

    instance_ids: tuple[str, ...]
    embeddings: np.ndarray  # n x K posterior means
    final_prior: GaussianPrior
    per_instance_cov: np.ndarray  # n x K x K posterior covariances
    final_draws: tuple[PosteriorDraws, ...]  # last-iteration chains, per instance
    history: tuple[IterationStats, ...]
    iterations_run: int
    converged: bool

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def K(self) -> int:
        return self.embeddings.shape[1]


class _PosteriorRows:
    """Vectorized unnormalized log posterior for a batch of count vectors.

    Evaluates the Dirichlet-Multinomial log marginal plus the Gaussian prior
    log density row-wise; the multinomial coefficient and the prior precision
    are precomputed once per (counts, prior) pair.
    """

    def __init__(self, counts: np.ndarray, prior: GaussianPrior):
        Y = np.asarray(counts, dtype=float)
        self.Y = Y
        self.J = Y.sum(axis=1)
        self.log_coef = gammaln(self.J + 1) - gammaln(Y + 1).sum(axis=1)
        self.mu = prior.mu
        K = prior.K
        L_inv = solve_triangular(prior.chol_lower, np.eye(K), lower=True)
        self.precision = L_inv.T @ L_inv
        self.log_norm = prior.log_norm_const

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        Zc = np.clip(Z, -Z_CLAMP, Z_CLAMP)
        hits = np.count_nonzero(Zc != Z)
        if hits:
            clamp_events.bump(hits)
        alpha = np.exp(Zc)
        alpha0 = alpha.sum(axis=1)
        P = Z.shape[0]
        g = gammaln(np.concatenate([alpha + self.Y, alpha], axis=0))
        g0 = gammaln(np.concatenate([alpha0, alpha0 + self.J]))
        d = Z - self.mu
        quad = np.einsum("ij,jk,ik->i", d, self.precision, d)
        return (
            self.log_coef
            + g[:P].sum(axis=1)
            - g[P:].sum(axis=1)
            + g0[:P]
            - g0[P:]
            + self.log_norm
            - 0.5 * quad
        )


def init_prior(K: int) -> GaussianPrior:
    """Starting prior: zero mean and covariance 10*I."""
    if K < 2:
        raise DomainError(f"K must be >= 2, got {K}")
    return GaussianPrior(np.zeros(K), 10.0 * np.eye(K))


def update_prior(estimates) -> GaussianPrior:
    """Maximum-likelihood Gaussian refit of the per-instance estimates.

    Mean is the plain average; the covariance uses divisor n (not n-1) and
    then the standard jitter policy if the scatter is rank deficient.
    """
    Z = np.atleast_2d(np.asarray(estimates, dtype=float))
    n = Z.shape[0]
    if n < 2:
        raise DomainError("need at least 2 estimates to update the prior")
    mu = Z.mean(axis=0)
    d = Z - mu
    sigma = (d.T @ d) / n
    return GaussianPrior(mu, sigma)


def _deduplicate(counts: np.ndarray):
    """Pattern matrix (first-appearance order) and instance->pattern map."""
    seen: dict[tuple, int] = {}
    inst2pat = np.empty(counts.shape[0], dtype=np.int64)
    patterns = []
    for i, row in enumerate(counts):
        key = tuple(int(c) for c in row)
        idx = seen.get(key)
        if idx is None:
            idx = len(patterns)
            seen[key] = idx
            patterns.append(row)
        inst2pat[i] = idx
    return np.stack(patterns), inst2pat


def _estep_chunk(args):
    counts, mu, sigma, inits, config, seeds = args
    prior = GaussianPrior(mu, sigma)
    target = _PosteriorRows(counts, prior)
    return rw_metropolis_batch(target, inits, config, seeds)


def _run_estep(pattern_counts, prior, inits, config, seeds, workers):
    if workers <= 1 or pattern_counts.shape[0] == 1:
        return _estep_chunk((pattern_counts, prior.mu, prior.sigma, inits, config, seeds))
    chunks = np.array_split(np.arange(pattern_counts.shape[0]), workers)
    chunks = [c for c in chunks if c.size]
    tasks = [
        (pattern_counts[c], prior.mu, prior.sigma, inits[c], config, [seeds[i] for i in c])
        for c in chunks
    ]
    results: list[PosteriorDraws] = []
    with ProcessPoolExecutor(max_workers=len(tasks)) as pool:
        for part in pool.map(_estep_chunk, tasks):
            results.extend(part)
    return results


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.linalg.norm(new - old) / max(1.0, np.linalg.norm(old)))


def fit(
    dataset: AnnotationDataset,
    config: Optional[EmConfig] = None,
    workers: int = 1,
) -> FitResult:
    """Estimate embeddings and the empirical-Bayes prior for a dataset.

    Chains start at the zero vector in the first iteration and at the
    previous per-pattern estimate afterwards.  Stops once the relative
    change of both the prior mean and covariance stays below ``rel_tol``
    for two consecutive iterations (after ``min_iterations``), or at
    ``max_iterations``.
    """
    config = config or EmConfig()
    if dataset.n < 2:
        raise DomainError("fitting needs at least 2 instances")
    K = dataset.K
    counts = dataset.counts_matrix()
    pattern_counts, inst2pat = _deduplicate(counts)
    n_patterns = pattern_counts.shape[0]
    multiplicity = np.bincount(inst2pat, minlength=n_patterns).astype(float)
    seeds = [derive_seed(config.mcmc.seed, p) for p in range(n_patterns)]

    prior = init_prior(K)
    inits = np.zeros((n_patterns, K))
    history: list[IterationStats] = []
    streak = 0
    converged = False
    draws_list: list[PosteriorDraws] = []
    pattern_means = inits

    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        try:
            draws_list = _run_estep(
                pattern_counts, prior, inits, config.mcmc, seeds, workers
            )
            pattern_means = np.stack([posterior_mean(d) for d in draws_list])
            if config.m_step == "paper":
                new_prior = update_prior(pattern_means[inst2pat])
            else:
                new_prior = _full_draws_prior(draws_list, multiplicity)
        except NumericalError as exc:
            raise NumericalError(f"fit failed at iteration {iteration}: {exc}") from exc
        mean_acceptance = float(np.mean([d.acceptance_rate for d in draws_list]))

        d_mu = _relative_change(new_prior.mu, prior.mu)
        d_sigma = _relative_change(new_prior.sigma, prior.sigma)
        history.append(
            IterationStats(
                iteration=iteration,
                mu=new_prior.mu.copy(),
                sigma_frobenius=float(np.linalg.norm(new_prior.sigma)),
                mean_acceptance=mean_acceptance,
            )
        )
        log.info(
            "iter %d: |dmu|=%.3e |dSigma|=%.3e mean_acceptance=%.3f",
            iteration,
            d_mu,
            d_sigma,
            mean_acceptance,
        )
        prior = new_prior
        streak = streak + 1 if (d_mu < config.rel_tol and d_sigma < config.rel_tol) else 0
        if streak >= 2 and iteration >= config.min_iterations:
            converged = True
            break
        inits = pattern_means

    per_pattern_cov = np.stack([posterior_covariance(d) for d in draws_list])
    return FitResult(
        instance_ids=tuple(dataset.ids()),
        embeddings=pattern_means[inst2pat],
        final_prior=prior,
        per_instance_cov=per_pattern_cov[inst2pat],
        final_draws=tuple(draws_list[p] for p in inst2pat),
        history=tuple(history),
        iterations_run=iteration,
        converged=converged,
    )


def _full_draws_prior(draws_list: Sequence[PosteriorDraws], multiplicity) -> GaussianPrior:
    """M-step that pools all retained draws instead of their means.

    Unlike the mean-based update this also captures within-instance posterior
    spread, so the fitted covariance is systematically larger.
    """
    w = np.asarray(multiplicity, dtype=float)
    n_eff = w.sum() * draws_list[0].n_retained
    K = draws_list[0].K
    mu = np.zeros(K)
    for wi, d in zip(w, draws_list):
        mu += wi * d.draws.sum(axis=0)
    mu /= n_eff
    sigma = np.zeros((K, K))
    for wi, d in zip(w, draws_list):
        c = d.draws - mu
        sigma += wi * (c.T @ c)
    sigma /= n_eff
    return GaussianPrior(mu, sigma)


def embed_new_instance(
    votes: VoteCounts, prior: GaussianPrior, mcmc: Optional[McmcConfig] = None
):
    """One E-step for a single instance against a frozen prior.

    Returns the posterior-mean embedding and the posterior covariance; no
    prior update happens.
    """
    mcmc = mcmc or McmcConfig()
    if not isinstance(votes, VoteCounts):
        votes = VoteCounts(votes)
    if votes.K != prior.K:
        raise DomainError(
            f"votes have {votes.K} classes but the prior is {prior.K}-dimensional"
        )
    target = _PosteriorRows(votes.counts[None, :], prior)
    draws = rw_metropolis_batch(
        target, np.zeros((1, prior.K)), mcmc, [mcmc.seed]
    )[0]
    return posterior_mean(draws), posterior_covariance(draws)
