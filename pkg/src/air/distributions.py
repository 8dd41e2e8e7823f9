"""Diagonal Gaussian and Bernoulli families.

All densities reduce over the last axis, so a batch of shape ``(..., D)``
yields log-probabilities of shape ``(...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, log, softplus, sqrt, square

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagGaussian:
    mean: Tensor
    variance: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.variance = as_tensor(self.variance)
        if self.mean.shape != self.variance.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} does not match variance shape {self.variance.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.ones(dim))


@dataclass
class BernoulliVec:
    logits: Tensor

    def __post_init__(self):
        self.logits = as_tensor(self.logits)
        if not np.all(np.isfinite(self.logits.data)):
            raise ValueError("Bernoulli logits must be finite")


def _check_variance(var: Tensor) -> None:
    if not np.all(var.data > 0):
        raise ValueError("variance must be strictly positive")


def gaussian_rsample(q: DiagGaussian, noise) -> Tensor:
    """Reparameterized draw ``mean + sqrt(variance) * noise``.

    ``noise`` may carry extra leading axes (e.g. importance samples).
    """
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape[-1] != q.dim:
        raise ValueError(f"noise dimension {noise.shape[-1]} does not match latent dimension {q.dim}")
    return q.mean + sqrt(q.variance) * noise


def gaussian_log_prob(q: DiagGaussian, z) -> Tensor:
    z = as_tensor(z)
    if z.shape[-1] != q.dim:
        raise ValueError(f"point dimension {z.shape[-1]} does not match distribution dimension {q.dim}")
    _check_variance(q.variance)
    per_dim = -0.5 * (LOG_2PI + log(q.variance)) - 0.5 * square(z - q.mean) / q.variance
    return per_dim.sum(axis=-1)


def standard_normal_log_prob(z) -> Tensor:
    z = as_tensor(z)
    return (-0.5 * LOG_2PI - 0.5 * square(z)).sum(axis=-1)


def gaussian_kl(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed-form ``KL(q || p)`` for diagonal Gaussians."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    _check_variance(q.variance)
    _check_variance(p.variance)
    ratio = q.variance / p.variance
    term = ratio + square(q.mean - p.mean) / p.variance - 1.0 - log(ratio)
    return (0.5 * term).sum(axis=-1)


def bernoulli_log_prob(p: BernoulliVec, x) -> Tensor:
    """``sum_i x_i * l_i - softplus(l_i)``; ``x`` must be binary."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("Bernoulli observations must be binary")
    return (p.logits * x - softplus(p.logits)).sum(axis=-1)
