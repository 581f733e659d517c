"""Causal effect estimation from deep generative model representations."""

__version__ = "0.1.0"
