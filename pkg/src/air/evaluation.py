"""Test-time bounds: amortized L_k, IW-SVI log-likelihood, inference gaps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from .distributions import DiagGaussian
from .nn import VARIANCE_FLOOR
from .objectives import ModelPair, iwae_log_weights
from .tensor import Tensor, backward, logsumexp, no_grad, softplus

ROW_CHUNK = 64
MAX_ELEMENTS = 2_000_000
SVI_CHUNK = 256
_SVI_STREAM = 1_000_003


def encode(encoder, x, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Encoder means and variances for every row of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    means, variances = [], []
    with no_grad():
        for start in range(0, len(x), chunk):
            q = encoder(x[start : start + chunk])
            means.append(q.mean.data)
            variances.append(q.variance.data)
    return np.concatenate(means), np.concatenate(variances)


def proposal_bound(decoder, x, mean, var, k: int, seed, reduce: str = "iwae") -> np.ndarray:
    """Per-example k-sample bound under fixed Gaussian proposals.

    ``reduce="iwae"`` gives ``logmeanexp`` of the log weights,
    ``reduce="elbo"`` their plain mean (a k-draw estimate of the 1-sample
    ELBO). Noise for row chunk ``c`` comes from ``default_rng([*seed, c])``,
    so the first draws are shared across different ``k``.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty split")
    seed = tuple(np.atleast_1d(seed).tolist())
    out = np.empty(len(x))
    latent = mean.shape[1]
    with no_grad():
        for c, start in enumerate(range(0, len(x), ROW_CHUNK)):
            rows = slice(start, start + ROW_CHUNK)
            xc = x[rows]
            noise = np.random.default_rng([*seed, c]).standard_normal((k, len(xc), latent))
            q = DiagGaussian(mean[rows], var[rows])
            block = max(1, MAX_ELEMENTS // (len(xc) * max(x.shape[1], latent)))
            pieces = [
                iwae_log_weights(decoder, xc, q, noise[b : b + block]).data for b in range(0, k, block)
            ]
            lw = np.concatenate(pieces, axis=0)
            if reduce == "iwae":
                peak = lw.max(axis=0)
                out[rows] = peak + np.log(np.exp(lw - peak).sum(axis=0)) - math.log(k)
            elif reduce == "elbo":
                out[rows] = lw.mean(axis=0)
            else:
                raise ValueError(f"unknown reduction {reduce!r}")
    return out


def amortized_bound_per_example(model: ModelPair, data, k: int, reps: int = 1, seed=0) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty split")
    mean, var = encode(model.encoder, x)
    seed = tuple(np.atleast_1d(seed).tolist())
    runs = [proposal_bound(model.decoder, x, mean, var, k, (*seed, r)) for r in range(reps)]
    return np.mean(runs, axis=0)


def amortized_bound(model: ModelPair, data, k: int, reps: int = 1, seed=0) -> float:
    """Mean k-sample bound with clean encoding; parameters are untouched."""
    return float(np.mean(amortized_bound_per_example(model, data, k, reps, seed)))


@dataclass
class SviConfig:
    ell: int = 8
    k_final: int = 512
    steps: int = 300
    svi_lr: float = 1e-2
    init: str = "amortized"

    def __post_init__(self):
        if self.ell < 1 or self.k_final < 1:
            raise ValueError("ell and k_final must be at least 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if not self.svi_lr > 0:
            raise ValueError("svi_lr must be positive")
        if self.init not in ("amortized", "prior"):
            raise ValueError("init must be 'amortized' or 'prior'")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SviConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown svi keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SviResult:
    per_example: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    flagged: np.ndarray

    @property
    def log_px(self) -> float:
        return float(np.mean(self.per_example))


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def _optimize_chunk(decoder, x, mean0, var0, cfg: SviConfig, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    from .training import AdamState, adam_step

    mu = Tensor(mean0.copy(), requires_grad=True, name="mu")
    rho = Tensor(_softplus_inverse(np.maximum(var0 - VARIANCE_FLOOR, 1e-300)), requires_grad=True, name="rho")
    params = {"mu": mu, "rho": rho}
    state = AdamState()
    flagged = np.zeros(len(x), dtype=bool)
    prev_mu, prev_rho = mu.data.copy(), rho.data.copy()
    latent = mean0.shape[1]
    for _ in range(cfg.steps):
        noise = rng.standard_normal((cfg.ell, len(x), latent))
        try:
            q = DiagGaussian(mu, softplus(rho) + VARIANCE_FLOOR)
            bound = logsumexp(iwae_log_weights(decoder, x, q, noise), axis=0)
        except FloatingPointError:
            # cannot attribute the failure to rows; keep the last finite step
            mu.data, rho.data = prev_mu, prev_rho
            flagged[:] = True
            break
        bad = ~np.isfinite(bound.data) & ~flagged
        if bad.any():
            mu.data[bad] = prev_mu[bad]
            rho.data[bad] = prev_rho[bad]
            flagged |= bad
        if flagged.all():
            break
        grads = backward(-bound.sum(), [mu, rho])
        g_mu, g_rho = grads[mu], grads[rho]
        g_mu[flagged] = 0.0
        g_rho[flagged] = 0.0
        prev_mu, prev_rho = mu.data.copy(), rho.data.copy()
        adam_step(params, {"mu": g_mu, "rho": g_rho}, state, cfg.svi_lr)
        # momentum would keep moving frozen rows
        mu.data[flagged] = prev_mu[flagged]
        rho.data[flagged] = prev_rho[flagged]
    var = np.logaddexp(0.0, rho.data) + VARIANCE_FLOOR
    return mu.data, var, flagged


def iw_svi(model: ModelPair, data, cfg: SviConfig, seed=0) -> SviResult:
    """Per-example proposal optimization followed by a ``k_final`` bound.

    Each example gets its own Gaussian, initialized from the encoder (or the
    prior) and trained with Adam on the ``ell``-sample bound while the
    decoder stays fixed. Examples are optimized jointly in chunks; the loss
    is a sum of independent per-example terms, so this is equivalent to
    separate runs.
    """
    x = np.asarray(data, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty split")
    seed = tuple(np.atleast_1d(seed).tolist())
    if cfg.init == "amortized":
        mean, var = encode(model.encoder, x)
    else:
        mean = np.zeros((len(x), model.latent_dim))
        var = np.ones((len(x), model.latent_dim))
    flagged = np.zeros(len(x), dtype=bool)
    if cfg.steps > 0:
        mean, var = mean.copy(), var.copy()
        with model.decoder.frozen():
            for c, start in enumerate(range(0, len(x), SVI_CHUNK)):
                rows = slice(start, start + SVI_CHUNK)
                rng = np.random.default_rng([*seed, _SVI_STREAM, c])
                mean[rows], var[rows], flagged[rows] = _optimize_chunk(
                    model.decoder, x[rows], mean[rows], var[rows], cfg, rng
                )
    per_example = proposal_bound(model.decoder, x, mean, var, cfg.k_final, (*seed, 0))
    return SviResult(per_example, mean, var, flagged)


@dataclass
class GapReport:
    split: str
    log_px: float
    amortized_bound: float
    elbo_star: float
    delta_infer: float
    delta_ap: float
    delta_am: float
    k: int
    ell: int
    svi_steps: int
    k_final: int
    flagged: int = 0

    CSV_HEADER = ("split", "neg_log_px", "delta_infer", "delta_ap", "delta_am", "neg_bound", "k", "ell", "svi_steps")

    def csv_row(self) -> tuple:
        return (
            self.split,
            -self.log_px,
            self.delta_infer,
            self.delta_ap,
            self.delta_am,
            -self.amortized_bound,
            self.k,
            self.ell,
            self.svi_steps,
        )


def gap_decomposition(model: ModelPair, data, k: int = 1, svi_cfg: SviConfig | None = None, seed=0, split: str = "test") -> GapReport:
    """Inference gap split into approximation and amortization parts.

    ``delta_infer = ln p(x) - L_k`` (amortized), ``delta_ap = ln p(x) - ELBO``
    of the per-example SVI proposals, ``delta_am`` is their difference.
    """
    svi_cfg = svi_cfg or SviConfig()
    x = np.asarray(data, dtype=np.float64)
    svi = iw_svi(model, x, svi_cfg, seed)
    log_px = svi.log_px
    bound = amortized_bound(model, x, k, reps=1, seed=seed)
    seed_t = tuple(np.atleast_1d(seed).tolist())
    elbo_star = float(np.mean(proposal_bound(model.decoder, x, svi.mean, svi.var, svi_cfg.k_final, (*seed_t, 2), reduce="elbo")))
    delta_infer = log_px - bound
    delta_ap = log_px - elbo_star
    return GapReport(
        split=split,
        log_px=log_px,
        amortized_bound=bound,
        elbo_star=elbo_star,
        delta_infer=delta_infer,
        delta_ap=delta_ap,
        delta_am=delta_infer - delta_ap,
        k=k,
        ell=svi_cfg.ell,
        svi_steps=svi_cfg.steps,
        k_final=svi_cfg.k_final,
        flagged=int(svi.flagged.sum()),
    )
