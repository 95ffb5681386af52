"""Learned image codec: non-local attention transforms, hyperprior + 3-d causal context entropy model."""

__version__ = "0.1.0"
