"""Pass/fail checks of the closed-form results against independent oracles."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import oracles
from .nn import build_decoder, build_encoder
from .tensor import no_grad

DEFAULT_TOLERANCES = {
    "roundtrip": 1e-10,
    "convexity": -1e-8,
    "uniform_limit": 1e-6,
    "grid_cells": 1.0,
    "bregman_violations": 0,
    "lipschitz_envelope": 4.0,
    "stderr_mult": 3.0,
    "decoder_grid": 0.002,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"


def _independent_weights(x, points, sigma, norm_mode):
    # deliberately not kernel_weights: densities from scipy, normalized here
    x = np.asarray(x, float)
    dist = np.linalg.norm(points - x, axis=1)
    if norm_mode == "squared":
        dens = stats.norm.pdf(dist, scale=sigma)
    else:
        dens = np.exp(-dist / (2.0 * sigma**2))
    return dens / dens.sum()


def check_roundtrip(tol):
    rng = np.random.default_rng(11)
    mean = rng.normal(0, 3, size=(1000, 1))
    var = rng.uniform(0.05, 5.0, size=(1000, 1))
    eta = oracles.gaussian_to_natural(mean, var)
    mu = oracles.natural_to_mean("diag-gaussian", eta)
    back = oracles.mean_to_natural("diag-gaussian", mu)
    err_g = np.max(np.abs(back - eta) / np.maximum(1.0, np.abs(eta)))
    # beyond |logit| ~ 8 the float64 mean 1 - p loses the digits needed for 1e-10
    logits = rng.uniform(-8, 8, size=(1000, 1))
    back = oracles.mean_to_natural("bernoulli", oracles.natural_to_mean("bernoulli", logits))
    err_b = np.max(np.abs(back - logits) / np.maximum(1.0, np.abs(logits)))
    worst = float(max(err_g, err_b))
    return worst, worst <= tol


def check_convexity(tol):
    rng = np.random.default_rng(12)
    worst = np.inf
    h = 1e-3
    for family in oracles.FAMILIES:
        for _ in range(200):
            if family == "diag-gaussian":
                a = oracles.gaussian_to_natural(rng.normal(0, 2, 2), rng.uniform(0.2, 3, 2))
                b = oracles.gaussian_to_natural(rng.normal(0, 2, 2), rng.uniform(0.2, 3, 2))
            else:
                a, b = rng.normal(0, 3, 3), rng.normal(0, 3, 3)
            t = rng.uniform(0.1, 0.9)
            pts = [a + (t + s) * (b - a) for s in (-h, 0.0, h)]
            f = [float(oracles.log_partition(family, p)) for p in pts]
            worst = min(worst, (f[0] - 2 * f[1] + f[2]) / h**2)
    return float(worst), worst >= tol


def check_uniform_limit(tol):
    rng = np.random.default_rng(13)
    pts = rng.uniform(-3, 3, size=(7, 2))
    w = oracles.kernel_weights(rng.uniform(-3, 3, 2), pts, 1e6)
    err = float(np.max(np.abs(w - 1.0 / len(pts))))
    return err, err <= tol


def check_kernel_optimum(tol, norm_mode):
    rng = np.random.default_rng(14 if norm_mode == "squared" else 15)
    worst = 0.0
    for _ in range(20):
        posts = oracles.SyntheticPosteriorSet.random_gaussian(3, 1, 1, rng)
        x = rng.uniform(-2, 2, size=1)
        sigma = rng.uniform(0.5, 2.0)
        closed = oracles.optimal_denoising_inference(x, posts, sigma, norm_mode)
        grid = oracles.natural_grid(posts)
        w = _independent_weights(x, posts.points, sigma, norm_mode)
        try:
            brute = oracles.brute_force_weighted_kl_min(w, posts, grid, refine=2)
        except oracles.GridTooSmall:
            return math.inf, False
        cells = np.array([ax[1] - ax[0] for ax in grid])
        worst = max(worst, float(np.max(np.abs(brute - closed) / cells)))
    return worst, worst <= tol


def check_bregman_min(tol):
    rng = np.random.default_rng(16)
    violations = 0
    for _ in range(50):
        posts = oracles.SyntheticPosteriorSet.random_gaussian(4, 1, 1, rng)
        x = rng.uniform(-2, 2, size=1)
        w = oracles.kernel_weights(x, posts.points, rng.uniform(0.3, 2.0))
        closed = w @ posts.naturals
        best = float(oracles.weighted_kl(closed, w, posts))
        a1, a2 = np.meshgrid(*oracles.natural_grid(posts), indexing="ij")
        cand = np.stack([a1.ravel(), a2.ravel()], axis=1)
        vals = oracles.weighted_kl(cand, w, posts)
        violations += int(np.sum(vals < best - 1e-12))
    return float(violations), violations <= tol


def lipschitz_curve(sigmas=(0.5, 1.0, 2.0, 4.0), seed=17, probe_pairs=2000):
    posts = oracles.SyntheticPosteriorSet.random_gaussian(10, 2, 1, np.random.default_rng(seed))
    return [oracles.empirical_lipschitz(posts, s, probe_pairs, seed) for s in sigmas]


def check_lipschitz_monotone(_tol):
    L = lipschitz_curve()
    worst = max(b - a for a, b in zip(L, L[1:]))
    return float(worst), worst <= 0.0


def check_lipschitz_envelope(tol):
    sigmas = (0.5, 1.0, 2.0, 4.0)
    L = lipschitz_curve(sigmas)
    scaled = [s * s * l for s, l in zip(sigmas, L)]
    ratio = max(scaled) / scaled[0]
    return float(ratio), ratio <= tol


def _regularizer_setup():
    model = oracles.LinearGaussianModel.make(3, 2, seed=18)
    data = model.sample(20, np.random.default_rng(19))
    return model, data


def check_regularizer_monotone(mult, mc=10_000):
    model, data = _regularizer_setup()
    est = [oracles.denoising_regularizer_value(model, data, s, mc, seed=20) for s in (0.1, 0.5, 1.0, 2.0)]
    worst = math.inf
    for lo, hi in zip(est, est[1:]):
        diff = hi.samples - lo.samples
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        worst = min(worst, (diff.mean() + mult * se))
    return float(worst), worst >= 0.0


def check_regularizer_factorized(mult, mc=10_000):
    model = oracles.LinearGaussianModel.factorized(3, 2)
    data = model.sample(20, np.random.default_rng(21))
    est = oracles.denoising_regularizer_value(model, data, 1.0, mc, seed=22)
    return est.value, abs(est.value) <= mult * est.stderr + 1e-12


def check_regularizer_small_sigma(mult, mc=1000):
    model, data = _regularizer_setup()
    est = oracles.denoising_regularizer_value(model, data, 1e-3, mc, seed=23)
    return est.value, abs(est.value) <= mult * est.stderr + 1e-9


def check_decoder_optimum(tol):
    rng = np.random.default_rng(24)
    worst = 0.0
    for _ in range(10):
        data = (rng.random((3, 5)) < 0.5).astype(float)
        means = rng.normal(0, 1, size=(3, 2))
        var = rng.uniform(0.3, 1.5, size=(3, 2))
        lookup = {tuple(row): (m, v) for row, m, v in zip(data, means, var)}
        z = rng.normal(0, 1, size=2)
        mu = oracles.optimal_decoder_params(z, data, lambda x: lookup[tuple(x)])
        # grid oracle weights from scipy densities, independent of the log-space path
        dens = np.array([np.prod(stats.norm.pdf(z, m, np.sqrt(v))) for m, v in zip(means, var)])
        grid_mu = oracles.grid_decoder_argmax(data, dens / dens.sum())
        worst = max(worst, float(np.max(np.abs(mu - grid_mu))))
    return worst, worst <= tol


def k_ordering(ks=(1, 2, 4, 8, 16), draws=10_000, seed=25):
    enc = build_encoder("d16-z2", 8, seed=seed)
    dec = build_decoder("d16-x8", 2, seed=seed + 1)
    x = (np.random.default_rng(seed).random((4, 8)) < 0.5).astype(float)
    with no_grad():
        q = enc(x)
    return oracles.bound_by_k(dec, x, q, ks, draws, seed)


def check_k_monotone(mult):
    res = k_ordering()
    worst = float(np.min(res.diff_means + mult * res.diff_stderrs))
    return worst, worst >= 0.0


def _aux_setup():
    return oracles.GaussianToyModel(1.0, 0.5), oracles.MixtureNoiseModel([-1.0, 1.5], [0.3, 0.7], 0.5)


def check_aux_bound_order(mult):
    toy, noise = _aux_setup()
    est = oracles.auxiliary_bound_gap(toy, noise, 100_000, seed=26)
    slack = est.gap + mult * est.gap_se
    return est.gap, slack >= 0.0


def check_aux_gap(mult):
    toy, noise = _aux_setup()
    est = oracles.auxiliary_bound_gap(toy, noise, 100_000, seed=27)
    kl = oracles.expected_component_kl(noise)
    z = abs(est.gap - kl) / est.gap_se
    return float(z), z <= mult


def check_aux_point_mass(_tol):
    toy = oracles.GaussianToyModel(1.0, 0.5)
    est = oracles.auxiliary_bound_gap(toy, oracles.MixtureNoiseModel([0.4], [1.0], 0.5), 1000, seed=28)
    diff = abs(est.L_a - est.L_b)
    return diff, diff == 0.0


CHECKS = [
    ("expfam_roundtrip", check_roundtrip, "roundtrip"),
    ("expfam_log_partition_convex", check_convexity, "convexity"),
    ("kernel_uniform_limit", check_uniform_limit, "uniform_limit"),
    ("kernel_optimum_grid_squared", lambda t: check_kernel_optimum(t, "squared"), "grid_cells"),
    ("kernel_optimum_grid_literal", lambda t: check_kernel_optimum(t, "literal"), "grid_cells"),
    ("convex_combination_minimizer", check_bregman_min, "bregman_violations"),
    ("lipschitz_monotone", check_lipschitz_monotone, None),
    ("lipschitz_envelope", check_lipschitz_envelope, "lipschitz_envelope"),
    ("regularizer_monotone", check_regularizer_monotone, "stderr_mult"),
    ("regularizer_factorized_zero", check_regularizer_factorized, "stderr_mult"),
    ("regularizer_small_sigma", check_regularizer_small_sigma, "stderr_mult"),
    ("decoder_optimum_grid", check_decoder_optimum, "decoder_grid"),
    ("iwae_k_monotone", check_k_monotone, "stderr_mult"),
    ("aux_bound_order", check_aux_bound_order, "stderr_mult"),
    ("aux_gap_matches_kl", check_aux_gap, "stderr_mult"),
    ("aux_point_mass", check_aux_point_mass, None),
]


def run_verification(overrides: dict | None = None, only=None) -> list[CheckResult]:
    tol = dict(DEFAULT_TOLERANCES)
    for key, value in (overrides or {}).items():
        if key not in tol:
            raise KeyError(f"unknown tolerance {key!r}; known: {sorted(tol)}")
        tol[key] = value
    results = []
    for name, fn, key in CHECKS:
        if only is not None and name not in only:
            continue
        threshold = tol[key] if key is not None else 0.0
        start = time.perf_counter()
        value, passed = fn(threshold)
        results.append(CheckResult(name, bool(passed), float(value), float(threshold), time.perf_counter() - start))
    return results
