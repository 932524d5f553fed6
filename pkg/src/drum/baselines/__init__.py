"""Comparison methods trained on the stable covariates only."""

from .models import BaselineHP, BaselineModel, WeightVector, chisq_robust_loss, fit_chisq_dro, fit_erm, fit_weighted_erm
from .pseudolabel import fit_pseudolabel, impute_pseudo_labels
from .weights import classifier_weights, ess, kmm_weights

__all__ = [
    "BaselineHP", "BaselineModel", "WeightVector", "chisq_robust_loss", "fit_chisq_dro", "fit_erm",
    "fit_weighted_erm", "fit_pseudolabel", "impute_pseudo_labels", "classifier_weights", "ess", "kmm_weights",
]
