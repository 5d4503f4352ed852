"""Post-fit analytics: correlation structure, PCA biplots, ellipses,
vote summaries and annotation subsampling.

Everything operates on in-memory arrays and returns plain data; rendering
and serialization live elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from .model import AnnotationDataset, ClassLabels, DomainError, Instance, VoteCounts
from .sampler import PosteriorDraws


@dataclass(frozen=True)
class CorrelationReport:
    """Correlation of embedding dimensions plus its MCMC standard deviation."""

    corr: np.ndarray
    std: np.ndarray
    n_instances: int
    n_draw_slices: int


@dataclass(frozen=True)
class PcaResult:
    scores: np.ndarray  # n x 2
    loadings: np.ndarray  # K x 2, axes scaled by sqrt(eigenvalue)
    explained_variance_ratio: np.ndarray
    center: np.ndarray
    groups: Optional[tuple] = None


@dataclass(frozen=True)
class EllipseSpec:
    group: str
    center: np.ndarray  # length 2
    axes: np.ndarray  # two semi-axis lengths, descending
    angle: float  # radians, orientation of the major axis


def _column_names(K: int, labels=None) -> list[str]:
    if labels is None:
        return [f"column {k}" for k in range(K)]
    if isinstance(labels, ClassLabels):
        return list(labels.names)
    return [str(x) for x in labels]


def _constant_columns(Z: np.ndarray) -> np.ndarray:
    """Columns whose spread is at rounding level relative to their magnitude."""
    sd = Z.std(axis=0)
    scale = np.maximum(1.0, np.abs(Z.mean(axis=0)))
    return sd <= 1e-13 * scale


def correlation_matrix(embeddings, labels=None) -> np.ndarray:
    """Pearson correlation across instances for each pair of dimensions."""
    Z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    n, K = Z.shape
    if n < 3:
        raise DomainError(f"need at least 3 instances, got {n}")
    const = _constant_columns(Z)
    if const.any():
        names = _column_names(K, labels)
        bad = ", ".join(names[k] for k in np.flatnonzero(const))
        raise DomainError(f"constant embedding dimension(s): {bad}")
    corr = np.corrcoef(Z, rowvar=False)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return corr


def _slice_correlation(Z: np.ndarray) -> np.ndarray:
    """Correlation matrix with constant columns contributing 0 off-diagonal."""
    ok = ~_constant_columns(Z)
    K = Z.shape[1]
    corr = np.eye(K)
    if ok.sum() >= 2:
        sub = np.corrcoef(Z[:, ok], rowvar=False)
        idx = np.flatnonzero(ok)
        corr[np.ix_(idx, idx)] = sub
        np.fill_diagonal(corr, 1.0)
    return corr


def correlation_std(final_draws: Sequence[PosteriorDraws]) -> np.ndarray:
    """Entrywise standard deviation of slice-wise correlation matrices.

    Slice s pairs the s-th retained draw of every instance; each slice gives
    one correlation matrix across instances and the spread over slices
    (ddof=1) measures how much the estimated correlations move with the
    MCMC samples.  The diagonal is exactly zero.
    """
    if len(final_draws) < 3:
        raise DomainError("need at least 3 instances")
    sizes = {d.n_retained for d in final_draws}
    if len(sizes) != 1:
        raise DomainError(f"instances have unequal retained draw counts: {sorted(sizes)}")
    n_slices = sizes.pop()
    if n_slices < 2:
        raise DomainError("need at least 2 retained draws per instance")
    stack = np.stack([d.draws for d in final_draws])  # n x S x K
    K = stack.shape[2]
    corrs = np.empty((n_slices, K, K))
    for s in range(n_slices):
        corrs[s] = _slice_correlation(stack[:, s, :])
    std = corrs.std(axis=0, ddof=1)
    std = 0.5 * (std + std.T)
    np.fill_diagonal(std, 0.0)
    return std


def correlation_report(embeddings, final_draws, labels=None) -> CorrelationReport:
    Z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    return CorrelationReport(
        corr=correlation_matrix(Z, labels=labels),
        std=correlation_std(final_draws),
        n_instances=Z.shape[0],
        n_draw_slices=final_draws[0].n_retained,
    )


def principal_components(embeddings, scale: bool = False):
    """Eigendecomposition of the (optionally correlation-scaled) covariance.

    Returns (eigenvalues descending, components with one column per axis,
    center).  Component signs follow a fixed convention: the entry of largest
    magnitude in each column is positive.
    """
    Z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    n, K = Z.shape
    if n <= 2:
        raise DomainError(f"need more than 2 instances, got {n}")
    if K < 2:
        raise DomainError("need at least 2 dimensions")
    center = Z.mean(axis=0)
    X = Z - center
    if scale:
        sd = X.std(axis=0, ddof=1)
        if np.any(sd == 0):
            raise DomainError("cannot scale constant columns to unit variance")
        X = X / sd
    cov = (X.T @ X) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    for j in range(K):
        k = int(np.argmax(np.abs(eigvecs[:, j])))
        if eigvecs[k, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    return eigvals, eigvecs, center


def pca_biplot(embeddings, groups=None, scale: bool = False) -> PcaResult:
    """Project embeddings onto the first two principal components.

    Scores are the centered data times the component directions; loadings are
    the directions scaled by the square roots of their eigenvalues, so angles
    between loading arrows reflect correlations between dimensions.
    """
    Z = np.atleast_2d(np.asarray(embeddings, dtype=float))
    n, K = Z.shape
    eigvals, eigvecs, center = principal_components(Z, scale=scale)
    if eigvals[1] <= max(eigvals[0], 1e-300) * 1e-12:
        raise DomainError("embeddings have rank < 2; no 2-D projection exists")
    if groups is not None:
        groups = tuple(groups)
        if len(groups) != n:
            raise DomainError(f"got {len(groups)} group labels for {n} instances")
    X = Z - center
    if scale:
        X = X / X.std(axis=0, ddof=1)
    scores = X @ eigvecs[:, :2]
    loadings = eigvecs[:, :2] * np.sqrt(eigvals[:2])
    total = eigvals.sum()
    ratio = eigvals / total if total > 0 else np.zeros_like(eigvals)
    return PcaResult(
        scores=scores,
        loadings=loadings,
        explained_variance_ratio=ratio[: min(n, K)],
        center=center,
        groups=groups,
    )


def concentration_ellipse(scores, coverage: float = 0.95, group: str = "") -> EllipseSpec:
    """Gaussian concentration ellipse of a 2-D point group.

    Semi-axes are sqrt(chi2_2 quantile at ``coverage`` times the covariance
    eigenvalues); the angle orients the major axis.
    """
    pts = np.atleast_2d(np.asarray(scores, dtype=float))
    if pts.shape[1] != 2:
        raise DomainError("scores must be m x 2")
    if pts.shape[0] < 3:
        raise DomainError(f"need at least 3 points, got {pts.shape[0]}")
    if not (0.0 < coverage < 1.0):
        raise DomainError("coverage must lie in (0, 1)")
    center = pts.mean(axis=0)
    cov = np.cov(pts, rowvar=False, ddof=1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[0] <= max(eigvals[1], 1e-300) * 1e-12:
        raise DomainError(f"degenerate 2-D covariance for group {group!r}")
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    leading = eigvecs[:, order[0]]
    q = chi2.ppf(coverage, df=2)
    return EllipseSpec(
        group=group,
        center=center,
        axes=np.sqrt(q * eigvals),
        angle=float(np.arctan2(leading[1], leading[0])),
    )


def majority_vote(votes: VoteCounts) -> tuple[int, bool]:
    """Most-voted class index; ties break to the lowest index with a flag."""
    counts = votes.counts if isinstance(votes, VoteCounts) else VoteCounts(votes).counts
    top = int(np.argmax(counts))
    tie = int(np.sum(counts == counts[top])) > 1
    return top, tie


@dataclass(frozen=True)
class AgreementStats:
    full_agreement_fraction: float
    distinct_pattern_count: int
    majority_counts: np.ndarray  # per-class histogram of majority votes


def agreement_stats(dataset: AnnotationDataset) -> AgreementStats:
    """Unanimity rate, number of distinct count vectors, majority histogram."""
    counts = dataset.counts_matrix()
    unanimous = int(np.sum(counts.max(axis=1) == counts.sum(axis=1)))
    patterns = {tuple(int(c) for c in row) for row in counts}
    hist = np.zeros(dataset.K, dtype=np.int64)
    for inst in dataset.instances:
        top, _ = majority_vote(inst.votes)
        hist[top] += 1
    return AgreementStats(
        full_agreement_fraction=unanimous / dataset.n,
        distinct_pattern_count=len(patterns),
        majority_counts=hist,
    )


def subsample_annotations(
    dataset: AnnotationDataset,
    plan: Sequence[tuple[int, int]],
    seed: int,
) -> AnnotationDataset:
    """Randomly thin each instance's annotations to a planned group size.

    ``plan`` is a list of (n_instances, J_target) cohorts whose sizes must sum
    to the dataset size.  Instances are assigned to cohorts by a seeded random
    permutation; each instance keeps J_target of its individual ballots drawn
    without replacement (multivariate hypergeometric on the counts).  Output
    instances carry a "J_group" metadata tag and keep the input order.
    """
    plan = [(int(n), int(j)) for n, j in plan]
    if any(n < 1 or j < 1 for n, j in plan):
        raise DomainError("plan entries must be positive")
    if sum(n for n, _ in plan) != dataset.n:
        raise DomainError(
            f"plan covers {sum(n for n, _ in plan)} instances, dataset has {dataset.n}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n)
    target_j = np.empty(dataset.n, dtype=np.int64)
    pos = 0
    for n_group, j in plan:
        target_j[order[pos : pos + n_group]] = j
        pos += n_group

    new_instances = []
    for inst, j in zip(dataset.instances, target_j):
        j = int(j)
        if j > inst.votes.J:
            raise DomainError(
                f"instance {inst.instance_id!r} has J={inst.votes.J} < requested {j}"
            )
        if j == inst.votes.J:
            kept = inst.votes.counts.copy()
        else:
            kept = rng.multivariate_hypergeometric(inst.votes.counts, j)
        meta = dict(inst.metadata)
        meta["J_group"] = str(j)
        new_instances.append(
            Instance(
                instance_id=inst.instance_id,
                votes=VoteCounts(kept),
                gold=inst.gold,
                metadata=meta,
            )
        )
    return AnnotationDataset(dataset.labels, new_instances)
