"""Bayesian recurrent networks for probabilistic multi-step-ahead solar forecasting."""

__version__ = "0.1.0"
