"""Distributionally robust transfer learning with structurally missing covariates."""

__version__ = "0.1.0"
