"""Bayesian self-distillation (BYOV): BYOL with a mean-field Gaussian posterior over student weights."""

__version__ = "0.1.0"
