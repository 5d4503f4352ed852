"""Domain types and closed-form probability kernels.

Everything here is a pure function of its inputs (safe to call from any
number of workers).  Probability kernels are computed in log space via
log-gamma throughout; Beta/Gamma functions are never formed directly, so
vote totals in the hundreds do not overflow.

An "embedding" is a plain 1-D float array of length K; exp(z) parameterizes
a Dirichlet distribution over the K class probabilities.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaln

# exp() overflow guard; with a Gaussian prior of variance ~10 per entry,
# |z| > 30 is practically unreachable, so clamping is a warning not an error.
Z_CLAMP = 30.0

LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    """An argument violates an operation's stated preconditions."""


class NumericalError(RuntimeError):
    """A numerical procedure failed beyond its recovery policy."""


class _ClampCounter:
    """Counts how often an embedding entry hit the +/-Z_CLAMP guard."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def bump(self, n=1):
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


clamp_events = _ClampCounter()


def _clamped_alpha(z: np.ndarray) -> np.ndarray:
    """exp(z) with entries of z clamped to [-Z_CLAMP, Z_CLAMP]."""
    zc = np.clip(z, -Z_CLAMP, Z_CLAMP)
    hits = np.count_nonzero(zc != z)
    if hits:
        clamp_events.bump(hits)
    return np.exp(zc)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassLabels:
    """Ordered class names; K >= 2 and names must be distinct."""

    names: tuple[str, ...]

    def __init__(self, names: Sequence[str]):
        names = tuple(str(n) for n in names)
        if len(names) < 2:
            raise DomainError(f"need at least 2 classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise DomainError("class names must be unique")
        object.__setattr__(self, "names", names)

    @property
    def K(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DomainError(f"unknown class {name!r}") from None


@dataclass(frozen=True, eq=False)
class VoteCounts:
    """Per-instance tally of annotations over the K classes."""

    counts: np.ndarray

    def __init__(self, counts):
        arr = np.asarray(counts)
        if arr.ndim != 1 or arr.size < 2:
            raise DomainError("counts must be a 1-D vector of length >= 2")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.floor(arr)):
                raise DomainError("counts must be integers")
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.int64)
        if np.any(arr < 0):
            raise DomainError("counts must be non-negative")
        if arr.sum() < 1:
            raise DomainError("an instance needs at least one annotation")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @property
    def J(self) -> int:
        return int(self.counts.sum())

    @property
    def K(self) -> int:
        return self.counts.size

    def key(self) -> tuple[int, ...]:
        """Hashable annotation pattern, used to pool duplicate instances."""
        return tuple(int(c) for c in self.counts)

    def __eq__(self, other):
        if not isinstance(other, VoteCounts):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


@dataclass(frozen=True)
class Instance:
    instance_id: str
    votes: VoteCounts
    gold: Optional[int] = None
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AnnotationDataset:
    """A set of multiply-annotated instances sharing one class scheme."""

    labels: ClassLabels
    instances: tuple[Instance, ...]

    def __init__(self, labels: ClassLabels, instances: Sequence[Instance]):
        instances = tuple(instances)
        if not instances:
            raise DomainError("dataset must contain at least one instance")
        seen = set()
        for inst in instances:
            if inst.instance_id in seen:
                raise DomainError(f"duplicate instance id {inst.instance_id!r}")
            seen.add(inst.instance_id)
            if inst.votes.K != labels.K:
                raise DomainError(
                    f"instance {inst.instance_id!r} has {inst.votes.K} counts, "
                    f"expected {labels.K}"
                )
            if inst.gold is not None and not (0 <= inst.gold < labels.K):
                raise DomainError(
                    f"instance {inst.instance_id!r} gold index {inst.gold} out of range"
                )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "instances", instances)

    @property
    def n(self) -> int:
        return len(self.instances)

    @property
    def K(self) -> int:
        return self.labels.K

    def counts_matrix(self) -> np.ndarray:
        """n x K integer matrix of vote counts."""
        return np.stack([inst.votes.counts for inst in self.instances])

    def ids(self) -> list[str]:
        return [inst.instance_id for inst in self.instances]


class BetaMoments(NamedTuple):
    mean: float
    variance: float
    log_variance: float


@dataclass(frozen=True)
class DirichletMoments:
    """Mean and covariance of the class probabilities given an embedding."""

    mean: np.ndarray
    cov: np.ndarray


def chol_with_jitter(sigma: np.ndarray, max_retries: int = 3):
    """Lower Cholesky factor of ``sigma``, adding diagonal jitter on failure.

    Each retry adds 1e-8 * mean(diag(sigma)) to the diagonal (with an
    absolute floor for all-zero matrices); after ``max_retries`` failed
    retries a NumericalError is raised.  Returns (L, sigma_used).
    """
    sigma = np.asarray(sigma, dtype=float)
    base = 1e-8 * float(np.mean(np.diag(sigma)))
    if base <= 0.0:
        base = 1e-8
    eye = np.eye(sigma.shape[0])
    trial = sigma
    for _ in range(max_retries + 1):
        try:
            return np.linalg.cholesky(trial), trial
        except np.linalg.LinAlgError:
            trial = trial + base * eye
    raise NumericalError(
        f"covariance not positive-definite after {max_retries} jitter retries"
    )


class GaussianPrior:
    """Multivariate Gaussian with a cached symmetric factorization.

    The covariance must be symmetric to 1e-10; it is symmetrized exactly and
    run through the jitter policy once at construction, so log-density
    evaluations in the sampling hot path reuse the factor.
    """

    def __init__(self, mu, sigma):
        mu = np.asarray(mu, dtype=float).reshape(-1)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise DomainError(
                f"sigma shape {sigma.shape} does not match mu length {mu.size}"
            )
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise DomainError("prior parameters must be finite")
        if np.max(np.abs(sigma - sigma.T)) > 1e-10:
            raise DomainError("sigma must be symmetric (within 1e-10)")
        sigma = 0.5 * (sigma + sigma.T)
        chol, sigma_used = chol_with_jitter(sigma)
        self.mu = mu
        self.sigma = sigma_used
        self._chol = chol
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        self._norm_const = -0.5 * (mu.size * LOG_2PI + self._log_det)

    @property
    def K(self) -> int:
        return self.mu.size

    @property
    def chol_lower(self) -> np.ndarray:
        return self._chol

    @property
    def log_norm_const(self) -> float:
        """log of the density's normalization constant."""
        return self._norm_const

    def logpdf(self, z) -> float:
        return float(self.logpdf_rows(np.asarray(z, dtype=float)[None, :])[0])

    def logpdf_rows(self, Z: np.ndarray) -> np.ndarray:
        """Normalized Gaussian log-density for each row of ``Z``."""
        d = np.atleast_2d(Z) - self.mu
        w = solve_triangular(self._chol, d.T, lower=True)
        return self._norm_const - 0.5 * np.einsum("ij,ij->j", w, w)


# ---------------------------------------------------------------------------
# Probability kernels
# ---------------------------------------------------------------------------


def log_beta_binomial_marginal(y: int, J: int, z) -> float:
    """Exact log pmf of y successes in J annotations given a 2-D embedding.

    The class probability is integrated out against Beta(exp(z1), exp(z2)).
    """
    if J < 1:
        raise DomainError(f"J must be >= 1, got {J}")
    if not (0 <= y <= J):
        raise DomainError(f"y must lie in [0, {J}], got {y}")
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != 2:
        raise DomainError(f"z must have length 2, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise DomainError("z must be finite")
    a, b = _clamped_alpha(z)
    log_choose = gammaln(J + 1) - gammaln(y + 1) - gammaln(J - y + 1)
    log_beta_ratio = (
        gammaln(a + y)
        + gammaln(b + J - y)
        - gammaln(a + b + J)
        - gammaln(a)
        - gammaln(b)
        + gammaln(a + b)
    )
    return float(log_choose + log_beta_ratio)


def _counts_array(y, K: Optional[int] = None) -> np.ndarray:
    if isinstance(y, VoteCounts):
        arr = y.counts
    else:
        arr = VoteCounts(y).counts
    if K is not None and arr.size != K:
        raise DomainError(f"counts have length {arr.size}, expected {K}")
    return arr


def log_dirichlet_multinomial_marginal(y, z) -> float:
    """Exact log pmf of a K-vector of vote counts given an embedding.

    The multinomial parameter is integrated out against Dir(exp(z)); this is
    the K >= 2 generalization of the Beta-Binomial marginal.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise DomainError("z must be finite")
    counts = _counts_array(y, K=z.size)
    alpha = _clamped_alpha(z)
    alpha0 = alpha.sum()
    J = counts.sum()
    log_coef = gammaln(J + 1) - gammaln(counts + 1).sum()
    return float(
        log_coef
        + gammaln(alpha + counts).sum()
        - gammaln(alpha).sum()
        + gammaln(alpha0)
        - gammaln(alpha0 + J)
    )


def log_posterior(z, y, prior: GaussianPrior) -> float:
    """Unnormalized log posterior density of an embedding given vote counts.

    Sum of the Dirichlet-Multinomial log marginal and the (fully normalized)
    Gaussian prior log density; only differences matter to the sampler.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != prior.K:
        raise DomainError(f"z has length {z.size}, prior is {prior.K}-dimensional")
    return log_dirichlet_multinomial_marginal(y, z) + prior.logpdf(z)


def dirichlet_moments(z) -> DirichletMoments:
    """Mean and covariance of the class probabilities under Dir(exp(z)).

    The mean is the softmax of z.  Cov(pi_k, pi_k') =
    (delta_kk' m_k - m_k m_k') / (1 + alpha0) with alpha0 = sum(exp(z)).
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise DomainError("z must be finite")
    zc = np.clip(z, -Z_CLAMP, Z_CLAMP)
    hits = np.count_nonzero(zc != z)
    if hits:
        clamp_events.bump(hits)
    shifted = zc - zc.max()
    expz = np.exp(shifted)
    mean = expz / expz.sum()
    alpha0 = np.exp(zc).sum()
    cov = (np.diag(mean) - np.outer(mean, mean)) / (1.0 + alpha0)
    return DirichletMoments(mean=mean, cov=cov)


def beta_moments(z) -> BetaMoments:
    """Mean, variance and log-variance of pi under Beta(exp(z1), exp(z2)).

    mean = e^{z1} / (e^{z1} + e^{z2});
    var  = e^{z1} e^{z2} / ((e^{z1}+e^{z2})^2 (e^{z1}+e^{z2}+1)).
    The log-variance is formed in log space so extreme embeddings do not
    underflow.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != 2:
        raise DomainError(f"z must have length 2, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise DomainError("z must be finite")
    z1, z2 = np.clip(z, -Z_CLAMP, Z_CLAMP)
    log_s = np.logaddexp(z1, z2)  # log(e^{z1}+e^{z2})
    # sigmoid form is exactly 0.5 whenever z1 == z2
    mean = float(1.0 / (1.0 + np.exp(z2 - z1)))
    log_var = float(z1 + z2 - 2.0 * log_s - np.logaddexp(log_s, 0.0))
    return BetaMoments(mean=mean, variance=float(np.exp(log_var)), log_variance=log_var)


@dataclass(frozen=True)
class GridSpec:
    """Inclusive 1-D grid ``start, start+step, ..., stop``."""

    start: float
    stop: float
    step: float

    def values(self) -> np.ndarray:
        if not (np.isfinite(self.start) and np.isfinite(self.stop)):
            raise DomainError("grid range must be finite")
        if self.step <= 0:
            raise DomainError("grid step must be > 0")
        n = int(np.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        if n < 1:
            raise DomainError("grid is empty")
        vals = self.start + self.step * np.arange(n)
        # snap to a resolution well below the step so ticks like 0.1*k print
        # (and compare) as exact decimals
        decimals = min(12, max(0, int(np.ceil(-np.log10(self.step)))) + 6)
        return np.round(vals, decimals)

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        parts = text.split(":")
        if len(parts) != 3:
            raise DomainError(f"range spec must be start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise DomainError(f"range spec must be numeric, got {text!r}") from None
        return cls(start, stop, step)


MOMENT_SURFACE_COLUMNS = ("z1", "z2", "mean", "log_variance")


def moment_surface(z1: GridSpec, z2: GridSpec) -> np.ndarray:
    """Beta mean and log-variance over a 2-D embedding grid.

    Returns an (n, 4) array with columns MOMENT_SURFACE_COLUMNS, one row per
    (z1, z2) grid point, intended for export and plotting.
    """
    v1 = z1.values()
    v2 = z2.values()
    g1, g2 = np.meshgrid(v1, v2, indexing="ij")
    rows = np.empty((g1.size, 4))
    rows[:, 0] = g1.ravel()
    rows[:, 1] = g2.ravel()
    zz1 = np.clip(rows[:, 0], -Z_CLAMP, Z_CLAMP)
    zz2 = np.clip(rows[:, 1], -Z_CLAMP, Z_CLAMP)
    log_s = np.logaddexp(zz1, zz2)
    rows[:, 2] = 1.0 / (1.0 + np.exp(zz2 - zz1))
    rows[:, 3] = zz1 + zz2 - 2.0 * log_s - np.logaddexp(log_s, 0.0)
    return rows
