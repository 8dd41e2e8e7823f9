"""Variational autoencoders with regularized amortized inference."""

__version__ = "0.1.0"
