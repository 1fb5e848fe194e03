"""Parallel CNN-LSTM deep-clustering speech separation with Bayesian
hyperparameter search."""

__version__ = "0.1.0"
