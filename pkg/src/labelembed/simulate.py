"""Forward sampling of the generative vote model, for synthetic studies.

Per instance: draw an embedding from the Gaussian prior, a class-probability
vector from Dir(exp(z)), then the votes from a multinomial.  Each instance
uses its own derived seed, so datasets are reproducible and insensitive to
how the instances are generated or scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .em import FitResult
from .model import (
    AnnotationDataset,
    ClassLabels,
    DomainError,
    GaussianPrior,
    Instance,
    VoteCounts,
    Z_CLAMP,
)
from .sampler import derive_seed


@dataclass(frozen=True)
class SimSpec:
    n: int
    K: int
    J: Union[int, Sequence[int]]
    prior: GaussianPrior
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("n must be >= 1")
        if self.K < 2:
            raise DomainError("K must be >= 2")
        if self.prior.K != self.K:
            raise DomainError(f"prior dimension {self.prior.K} != K={self.K}")
        j = self.j_per_instance()
        if np.any(j < 1):
            raise DomainError("every J must be >= 1")

    def j_per_instance(self) -> np.ndarray:
        if np.isscalar(self.J):
            return np.full(self.n, int(self.J), dtype=np.int64)
        j = np.asarray(self.J, dtype=np.int64)
        if j.shape != (self.n,):
            raise DomainError(f"per-instance J must have length n={self.n}")
        return j


def _dirichlet(rng: np.random.Generator, alpha: np.ndarray) -> np.ndarray:
    """Dirichlet draw via normalized Gammas, robust to tiny concentrations.

    Gamma draws with shape << 1 can underflow to exactly zero; in the
    all-zero case the distribution's vertex limit applies and a single
    category is picked with probability alpha_k / sum(alpha).
    """
    g = rng.standard_gamma(alpha)
    total = g.sum()
    if total <= 0.0 or not np.isfinite(total):
        pi = np.zeros_like(alpha)
        pi[rng.choice(alpha.size, p=alpha / alpha.sum())] = 1.0
        return pi
    return g / total


def sample_dataset(spec: SimSpec):
    """Simulate an annotated dataset; returns (dataset, true n x K embeddings)."""
    K = spec.K
    labels = ClassLabels([f"c{k + 1}" for k in range(K)])
    chol = spec.prior.chol_lower
    j_all = spec.j_per_instance()
    true_z = np.empty((spec.n, K))
    instances = []
    width = len(str(spec.n))
    for i in range(spec.n):
        rng = np.random.default_rng(derive_seed(spec.seed, i))
        z = spec.prior.mu + chol @ rng.standard_normal(K)
        true_z[i] = z
        alpha = np.exp(np.clip(z, -Z_CLAMP, Z_CLAMP))
        pi = _dirichlet(rng, alpha)
        counts = rng.multinomial(int(j_all[i]), pi)
        instances.append(
            Instance(instance_id=f"sim{i:0{width}d}", votes=VoteCounts(counts))
        )
    return AnnotationDataset(labels, instances), true_z


def _softmax_rows(Z: np.ndarray) -> np.ndarray:
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def recovery_score(true_embeddings, fitted: FitResult):
    """How well a fit recovered simulated truth.

    Returns (rmse_mu, tv): the root-mean-square gap between the fitted prior
    mean and the average true embedding, and the per-instance total-variation
    distance between the softmax class distributions of truth and fit.
    """
    true_z = np.atleast_2d(np.asarray(true_embeddings, dtype=float))
    if true_z.shape != fitted.embeddings.shape:
        raise DomainError(
            f"shape mismatch: truth {true_z.shape} vs fit {fitted.embeddings.shape}"
        )
    mu_true = true_z.mean(axis=0)
    rmse_mu = float(np.sqrt(np.mean((fitted.final_prior.mu - mu_true) ** 2)))
    p = _softmax_rows(true_z)
    q = _softmax_rows(fitted.embeddings)
    tv = 0.5 * np.abs(p - q).sum(axis=1)
    return rmse_mu, tv
