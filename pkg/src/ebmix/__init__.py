"""Empirical-Bayes mixture models for two-sample differential expression.

Genes are either null or non-null; non-null effects are random and the
gene error variances follow an inverse-gamma prior. Parameters are fitted by
a Laplace-approximated EM algorithm and genes are classified by local false
discovery rate or by the Benjamini-Hochberg rule.
"""
__version__ = "0.1.0"

from .core import (DataValidationError, ExpressionMatrix, GeneSummaries, ModelKind,
                   paired_summarize, summarize)
from .em import (EmConfig, FitResult, MixtureParams, NonIdentifiableError, e_step, fit,
                 fit_at, laplace_complete_loglik, m_step)
from .inference import (DecisionConfig, GeneInference, bh_procedure, classify_local_fdr,
                        decide, likelihood_ratio, theoretical_null_pvalues)
from .prior import (PriorFitError, VariancePrior, fit_variance_prior,
                    fit_variance_prior_moments, posterior_mode_variance)

__all__ = [
    "DataValidationError", "DecisionConfig", "EmConfig", "ExpressionMatrix", "FitResult",
    "GeneInference", "GeneSummaries", "MixtureParams", "ModelKind", "NonIdentifiableError",
    "PriorFitError", "VariancePrior", "bh_procedure", "classify_local_fdr", "decide",
    "e_step", "fit", "fit_at", "fit_variance_prior", "fit_variance_prior_moments",
    "laplace_complete_loglik", "likelihood_ratio", "m_step", "paired_summarize",
    "posterior_mode_variance", "summarize", "theoretical_null_pvalues",
]
