"""Continuous label embeddings from multiply-annotated classification data.

Vote counts per instance are modeled as Dirichlet-Multinomial draws whose
concentration is the exponential of a latent embedding vector; embeddings
share an empirical-Bayes Gaussian prior fitted by stochastic EM with
random-walk Metropolis E-steps.
"""

from .analysis import (
    AgreementStats,
    CorrelationReport,
    EllipseSpec,
    PcaResult,
    agreement_stats,
    concentration_ellipse,
    correlation_matrix,
    correlation_report,
    correlation_std,
    majority_vote,
    pca_biplot,
    principal_components,
    subsample_annotations,
)
from .dataio import (
    DatasetFormatError,
    Reports,
    RunConfig,
    load_dataset,
    write_dataset,
    write_outputs,
)
from .em import (
    EmConfig,
    FitResult,
    embed_new_instance,
    fit,
    init_prior,
    update_prior,
)
from .model import (
    AnnotationDataset,
    BetaMoments,
    ClassLabels,
    DirichletMoments,
    DomainError,
    GaussianPrior,
    GridSpec,
    Instance,
    NumericalError,
    VoteCounts,
    beta_moments,
    clamp_events,
    dirichlet_moments,
    log_beta_binomial_marginal,
    log_dirichlet_multinomial_marginal,
    log_posterior,
    moment_surface,
)
from .sampler import (
    McmcConfig,
    PosteriorDraws,
    derive_seed,
    effective_sample_size,
    posterior_covariance,
    posterior_mean,
    rw_metropolis,
    rw_metropolis_batch,
)
from .simulate import SimSpec, recovery_score, sample_dataset

__version__ = "0.1.0"

__all__ = [
    "AgreementStats",
    "AnnotationDataset",
    "BetaMoments",
    "ClassLabels",
    "CorrelationReport",
    "DatasetFormatError",
    "DirichletMoments",
    "DomainError",
    "EllipseSpec",
    "EmConfig",
    "FitResult",
    "GaussianPrior",
    "GridSpec",
    "Instance",
    "McmcConfig",
    "NumericalError",
    "PcaResult",
    "PosteriorDraws",
    "Reports",
    "RunConfig",
    "SimSpec",
    "VoteCounts",
    "agreement_stats",
    "beta_moments",
    "clamp_events",
    "concentration_ellipse",
    "correlation_matrix",
    "correlation_report",
    "correlation_std",
    "derive_seed",
    "dirichlet_moments",
    "effective_sample_size",
    "embed_new_instance",
    "fit",
    "init_prior",
    "load_dataset",
    "log_beta_binomial_marginal",
    "log_dirichlet_multinomial_marginal",
    "log_posterior",
    "majority_vote",
    "moment_surface",
    "pca_biplot",
    "posterior_covariance",
    "posterior_mean",
    "principal_components",
    "recovery_score",
    "rw_metropolis",
    "rw_metropolis_batch",
    "sample_dataset",
    "subsample_annotations",
    "update_prior",
    "write_dataset",
    "write_outputs",
]
