"""Amortized ELBO, IWAE-k and (partially) denoising training objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .distributions import DiagGaussian, gaussian_log_prob, gaussian_rsample, standard_normal_log_prob
from .tensor import Tensor, logsumexp

KINDS = ("vae", "dvae", "iwae", "diwae")


@dataclass
class ObjectiveConfig:
    kind: str = "vae"
    k: int = 1
    m: int = 1
    sigma: float = 0.0
    alpha: float = 1.0
    weight_norm_H: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"objective kind must be one of {KINDS}, got {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.kind in ("vae", "iwae") and self.sigma != 0:
            raise ValueError(f"kind {self.kind!r} does not inject noise; sigma must be 0")
        if self.weight_norm_H is not None and not self.weight_norm_H > 0:
            raise ValueError("weight_norm_H must be positive")

    @property
    def denoising(self) -> bool:
        return self.kind in ("dvae", "diwae")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ObjectiveConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown objective keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ModelPair:
    """Encoder, decoder and the fixed standard-normal prior."""

    encoder: Any
    decoder: Any
    prior: DiagGaussian = field(default=None)

    def __post_init__(self):
        dim = self.encoder.latent_dim
        if self.decoder.latent_dim != dim:
            raise ValueError(
                f"encoder latent dim {dim} does not match decoder input dim {self.decoder.latent_dim}"
            )
        if self.prior is None:
            self.prior = DiagGaussian.standard(dim)

    @property
    def latent_dim(self) -> int:
        return self.encoder.latent_dim

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.parameters(), **self.decoder.parameters()}

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state(state)
        self.decoder.load_state(state)


def perturb_inputs(x, sigma: float, noise) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x.shape != noise.shape:
        raise ValueError(f"input shape {x.shape} does not match noise shape {noise.shape}")
    if sigma == 0:
        return x
    return x + sigma * noise


def iwae_log_weights(decoder, x, q: DiagGaussian, noise) -> Tensor:
    """``ln p(z) + ln p(x|z) - ln q(z)`` for reparameterized draws, shape ``(k, B)``."""
    z = gaussian_rsample(q, noise)
    return standard_normal_log_prob(z) + decoder.log_likelihood(z, x) - gaussian_log_prob(q, z)


def iwae_bound_from_proposal(decoder, x, q: DiagGaussian, noise) -> Tensor:
    k = np.shape(noise)[0]
    return logsumexp(iwae_log_weights(decoder, x, q, noise), axis=0) - math.log(k)


def iwae_bound_sample(model: ModelPair, x, proposals_from, k: int, noise) -> Tensor:
    """Per-example k-sample bound.

    The proposal is computed from ``proposals_from`` (clean or perturbed
    input), while the decoder always scores the clean ``x``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[0] != k:
        raise ValueError(f"expected noise of shape (k={k}, batch, latent), got {noise.shape}")
    q = model.encoder(proposals_from)
    return iwae_bound_from_proposal(model.decoder, x, q, noise)


def training_loss(model: ModelPair, x, cfg: ObjectiveConfig, rng: np.random.Generator) -> Tensor:
    """Negative batch-mean bound averaged over ``cfg.m`` Monte Carlo repetitions.

    Denoising kinds mix a perturbed-encoder term (weight ``alpha``) with a
    clean-encoder term (weight ``1 - alpha``); both share the latent noise.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[0]
    total = None
    for _ in range(cfg.m):
        latent_noise = rng.standard_normal((cfg.k, batch, model.latent_dim))
        if cfg.denoising:
            eps = rng.standard_normal(x.shape)
            noisy = iwae_bound_sample(model, x, perturb_inputs(x, cfg.sigma, eps), cfg.k, latent_noise)
            if cfg.alpha == 1.0:
                term = noisy
            else:
                clean = iwae_bound_sample(model, x, x, cfg.k, latent_noise)
                term = cfg.alpha * noisy + (1.0 - cfg.alpha) * clean
        else:
            term = iwae_bound_sample(model, x, x, cfg.k, latent_noise)
        term = term.sum()
        total = term if total is None else total + term
    return -total / float(batch * cfg.m)
