"""Closed forms and brute-force checks on tractable exponential-family models.

Everything here is plain numpy: these functions are test oracles for the
autodiff-based training code and must not share code paths with it.

Gaussian natural parameters are laid out as ``[mean/var, -1/(2 var)]``
(first all location terms, then all precision terms); Bernoulli natural
parameters are logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import expit, log_softmax, logsumexp, softmax

from .distributions import DiagGaussian
from .nn import Module
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
FAMILIES = ("diag-gaussian", "bernoulli")


# --------------------------------------------------------------------------
# exponential families


def gaussian_to_natural(mean, var) -> np.ndarray:
    mean, var = np.asarray(mean, float), np.asarray(var, float)
    return np.concatenate([mean / var, -0.5 / var], axis=-1)


def natural_to_gaussian(eta) -> tuple[np.ndarray, np.ndarray]:
    eta = np.asarray(eta, float)
    d = eta.shape[-1] // 2
    loc, prec = eta[..., :d], eta[..., d:]
    if np.any(prec >= 0):
        raise ValueError("Gaussian natural parameters need negative precision terms")
    var = -0.5 / prec
    return loc * var, var


def log_partition(family: str, eta) -> np.ndarray:
    eta = np.asarray(eta, float)
    if family == "diag-gaussian":
        d = eta.shape[-1] // 2
        loc, prec = eta[..., :d], eta[..., d:]
        return np.sum(-(loc**2) / (4.0 * prec) - 0.5 * np.log(-2.0 * prec) + 0.5 * LOG_2PI, axis=-1)
    if family == "bernoulli":
        return np.sum(np.logaddexp(0.0, eta), axis=-1)
    raise ValueError(f"unknown family {family!r}")


def natural_to_mean(family: str, eta) -> np.ndarray:
    """Gradient of the log-partition: the expected sufficient statistic."""
    if family == "diag-gaussian":
        mean, var = natural_to_gaussian(eta)
        return np.concatenate([mean, mean**2 + var], axis=-1)
    if family == "bernoulli":
        return expit(np.asarray(eta, float))
    raise ValueError(f"unknown family {family!r}")


def mean_to_natural(family: str, mu) -> np.ndarray:
    mu = np.asarray(mu, float)
    if family == "diag-gaussian":
        d = mu.shape[-1] // 2
        mean, second = mu[..., :d], mu[..., d:]
        var = second - mean**2
        if np.any(var <= 0):
            raise ValueError("second moment must exceed squared mean")
        return gaussian_to_natural(mean, var)
    if family == "bernoulli":
        if np.any((mu <= 0) | (mu >= 1)):
            raise ValueError("Bernoulli means must lie in (0, 1)")
        return np.log(mu) - np.log1p(-mu)
    raise ValueError(f"unknown family {family!r}")


@dataclass
class ExpFamilyMember:
    family: str
    natural: np.ndarray
    mean: np.ndarray
    log_partition: float

    @classmethod
    def from_natural(cls, family: str, eta) -> "ExpFamilyMember":
        eta = np.asarray(eta, float)
        return cls(family, eta, natural_to_mean(family, eta), float(log_partition(family, eta)))

    @classmethod
    def from_mean(cls, family: str, mu) -> "ExpFamilyMember":
        return cls.from_natural(family, mean_to_natural(family, mu))

    def sufficient_statistic(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.family == "diag-gaussian":
            return np.concatenate([x, x**2], axis=-1)
        return x


def bregman_kl(family: str, eta_q, eta_p) -> np.ndarray:
    """``KL(q || p)`` as the Bregman divergence ``d_A(eta_p, eta_q)``."""
    eta_q, eta_p = np.asarray(eta_q, float), np.asarray(eta_p, float)
    grad = natural_to_mean(family, eta_q)
    return (
        log_partition(family, eta_p)
        - log_partition(family, eta_q)
        - np.sum(grad * (eta_p - eta_q), axis=-1)
    )


def gaussian_kl_np(mean_q, var_q, mean_p, var_p) -> np.ndarray:
    ratio = var_q / var_p
    return 0.5 * np.sum(ratio + (mean_q - mean_p) ** 2 / var_p - 1.0 - np.log(ratio), axis=-1)


def natural_kl(family: str, eta_q, eta_p) -> np.ndarray:
    """Closed-form KL in the family's natural coordinates (moment route)."""
    if family == "diag-gaussian":
        mq, vq = natural_to_gaussian(eta_q)
        mp, vp = natural_to_gaussian(eta_p)
        return gaussian_kl_np(mq, vq, mp, vp)
    pq, pp = expit(np.asarray(eta_q, float)), expit(np.asarray(eta_p, float))
    return np.sum(pq * (np.log(pq) - np.log(pp)) + (1 - pq) * (np.log1p(-pq) - np.log1p(-pp)), axis=-1)


@dataclass
class SyntheticPosteriorSet:
    """Data points with exact posteriors given as natural parameters."""

    points: np.ndarray
    naturals: np.ndarray
    family: str = "diag-gaussian"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, float))
        self.naturals = np.atleast_2d(np.asarray(self.naturals, float))
        if len(self.points) != len(self.naturals):
            raise ValueError("one natural parameter vector per data point")
        if self.family == "diag-gaussian":
            d = self.naturals.shape[1] // 2
            if np.any(self.naturals[:, d:] >= 0):
                raise ValueError("posterior naturals outside the Gaussian natural domain")

    @property
    def n(self) -> int:
        return len(self.points)

    @classmethod
    def random_gaussian(cls, n: int, x_dim: int, z_dim: int, rng) -> "SyntheticPosteriorSet":
        points = rng.uniform(-2.0, 2.0, size=(n, x_dim))
        mean = rng.uniform(-2.0, 2.0, size=(n, z_dim))
        var = rng.uniform(0.3, 2.0, size=(n, z_dim))
        return cls(points, gaussian_to_natural(mean, var))


# --------------------------------------------------------------------------
# kernel-regression optimum of the denoising objective


def kernel_weights(x, dataset, sigma: float, norm_mode: str = "squared") -> np.ndarray:
    """Normalized RBF weights of ``x`` against every dataset point.

    ``squared`` uses ``exp(-||x-y||^2 / (2 sigma^2))``; ``literal`` uses the
    unsquared distance ``exp(-||x-y|| / (2 sigma^2))``. ``x`` may be a single
    point or a batch; the last axis of the result indexes the dataset.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    dataset = np.atleast_2d(np.asarray(dataset, float))
    if len(dataset) == 0:
        raise ValueError("dataset must contain at least one point")
    x = np.asarray(x, float)
    diff = x[..., None, :] - dataset
    sq = np.sum(diff * diff, axis=-1)
    if norm_mode == "squared":
        logits = -sq / (2.0 * sigma**2)
    elif norm_mode == "literal":
        logits = -np.sqrt(sq) / (2.0 * sigma**2)
    else:
        raise ValueError(f"unknown norm mode {norm_mode!r}")
    return softmax(logits, axis=-1)


def optimal_denoising_inference(x, posts: SyntheticPosteriorSet, sigma: float, norm_mode: str = "squared") -> np.ndarray:
    """Kernel-weighted average of the posterior natural parameters."""
    return kernel_weights(x, posts.points, sigma, norm_mode) @ posts.naturals


class GridTooSmall(ValueError):
    pass


def natural_grid(posts: SyntheticPosteriorSet, points: int = 201, margin: float = 0.5) -> list[np.ndarray]:
    """One axis per natural coordinate spanning the posteriors' hull plus margin."""
    axes = []
    d = posts.naturals.shape[1] // 2
    for j in range(posts.naturals.shape[1]):
        col = posts.naturals[:, j]
        lo, hi = col.min(), col.max()
        span = max(hi - lo, 0.5 * abs(hi), 1e-3)
        lo, hi = lo - margin * span, hi + margin * span
        if posts.family == "diag-gaussian" and j >= d:
            hi = min(hi, 0.5 * col.max())
        axes.append(np.linspace(lo, hi, points))
    return axes


def weighted_kl(eta, weights, posts: SyntheticPosteriorSet) -> np.ndarray:
    """``sum_i w_i KL(q_eta || p_i)`` for a batch of candidate ``eta``."""
    eta = np.asarray(eta, float)
    kl = natural_kl(posts.family, eta[..., None, :], posts.naturals)
    return kl @ np.asarray(weights, float)


def _gaussian_pair_objective(a1, a2, weights, naturals, j, d):
    # weighted KL restricted to latent coordinate j; a1/a2 are grid arrays
    var = -0.5 / a2
    mean = a1 * var
    total = np.zeros_like(a1)
    for w, eta in zip(weights, naturals):
        vp = -0.5 / eta[d + j]
        mp = eta[j] * vp
        ratio = var / vp
        total += w * 0.5 * (ratio + (mean - mp) ** 2 / vp - 1.0 - np.log(ratio))
    return total


def _zoom(axis: np.ndarray, i: int, cells: int, points: int) -> np.ndarray:
    h = axis[1] - axis[0]
    return np.linspace(axis[i] - cells * h, axis[i] + cells * h, points)


def brute_force_weighted_kl_min(
    weights, posts: SyntheticPosteriorSet, grid: list[np.ndarray], refine: int = 0, zoom_cells: int = 5
) -> np.ndarray:
    """Grid minimizer of the weighted KL sum, one latent coordinate at a time.

    The objective separates across latent coordinates, so each coordinate's
    (location, precision) pair is searched on its own 2-D grid. With
    ``refine > 0`` the search is repeated that many times on a grid of the
    same size spanning ``zoom_cells`` cells either side of the previous
    argmin; the valley of the objective is tilted in natural coordinates, so
    a single coarse grid can land more than one cell from the optimum.
    """
    weights = np.asarray(weights, float)
    naturals = posts.naturals
    if posts.family == "diag-gaussian":
        d = naturals.shape[1] // 2
        best = np.empty(2 * d)
        for j in range(d):
            ax1, ax2 = grid[j], grid[d + j]
            for level in range(refine + 1):
                a1, a2 = np.meshgrid(ax1, ax2, indexing="ij")
                with np.errstate(invalid="ignore", divide="ignore"):
                    obj = _gaussian_pair_objective(a1, a2, weights, naturals, j, d)
                obj = np.where(a2 < 0, obj, np.inf)
                i1, i2 = np.unravel_index(np.argmin(obj), obj.shape)
                if i1 in (0, len(ax1) - 1) or i2 in (0, len(ax2) - 1):
                    raise GridTooSmall(f"minimizer for latent coordinate {j} lies on the grid boundary (level {level})")
                if level < refine:
                    ax1 = _zoom(ax1, i1, zoom_cells, len(ax1))
                    ax2 = _zoom(ax2, i2, zoom_cells, len(ax2))
            best[j], best[d + j] = ax1[i1], ax2[i2]
        return best
    best = np.empty(naturals.shape[1])
    for j, ax in enumerate(grid):
        pp = expit(naturals[:, j])[None, :]
        for level in range(refine + 1):
            p = expit(ax)[:, None]
            kl = p * (np.log(p) - np.log(pp)) + (1 - p) * (np.log1p(-p) - np.log1p(-pp))
            i = int(np.argmin(kl @ weights))
            if i in (0, len(ax) - 1):
                raise GridTooSmall(f"minimizer for coordinate {j} lies on the grid boundary (level {level})")
            if level < refine:
                ax = _zoom(ax, i, zoom_cells, len(ax))
        best[j] = ax[i]
    return best


def empirical_lipschitz(
    posts: SyntheticPosteriorSet,
    sigma: float,
    probe_pairs: int,
    seed: int,
    norm_mode: str = "squared",
    offset: float = 1e-3,
) -> float:
    """Largest L1 difference quotient of the kernel-regression map.

    Probe centers are uniform over the data's bounding box (widened by 25%);
    partners sit at L1 distance ``offset`` in a random direction, so the
    quotient approximates the local slope.
    """
    if probe_pairs < 100:
        raise ValueError("probe_pairs must be at least 100")
    rng = np.random.default_rng(seed)
    lo, hi = posts.points.min(axis=0), posts.points.max(axis=0)
    pad = 0.25 * np.maximum(hi - lo, 1e-6)
    x1 = rng.uniform(lo - pad, hi + pad, size=(probe_pairs, posts.points.shape[1]))
    direction = rng.standard_normal(x1.shape)
    direction /= np.abs(direction).sum(axis=1, keepdims=True)
    x2 = x1 + offset * direction
    dist = np.abs(x1 - x2).sum(axis=1)
    keep = dist >= 1e-9
    f1 = optimal_denoising_inference(x1[keep], posts, sigma, norm_mode)
    f2 = optimal_denoising_inference(x2[keep], posts, sigma, norm_mode)
    ratios = np.abs(f1 - f2).sum(axis=1) / dist[keep]
    return float(ratios.max()) if ratios.size else 0.0


# --------------------------------------------------------------------------
# optimal decoder


def _gaussian_log_density(z, mean, var) -> float:
    return float(np.sum(-0.5 * (LOG_2PI + np.log(var)) - 0.5 * (z - mean) ** 2 / var))


def decoder_responsibilities(z, data, proposal_fn) -> np.ndarray:
    """``q(z|x_i) / sum_j q(z|x_j)`` computed in log space."""
    data = np.atleast_2d(np.asarray(data, float))
    if len(data) == 0:
        raise ValueError("need at least one data point")
    z = np.asarray(z, float)
    logq = []
    for x in data:
        q = proposal_fn(x)
        if isinstance(q, DiagGaussian):
            mean, var = q.mean.data, q.variance.data
        else:
            mean, var = q
        logq.append(_gaussian_log_density(z, np.asarray(mean, float), np.asarray(var, float)))
    logq = np.array(logq)
    if not np.any(np.isfinite(logq)):
        raise FloatingPointError("every proposal density underflows at z")
    return np.exp(log_softmax(logq))


def optimal_decoder_params(z, data, proposal_fn) -> np.ndarray:
    """Responsibility-weighted average of the sufficient statistics ``T(x) = x``."""
    data = np.atleast_2d(np.asarray(data, float))
    return decoder_responsibilities(z, data, proposal_fn) @ data


def expected_bernoulli_loglik(mu, data, weights) -> np.ndarray:
    """``sum_i w_i ln p_mu(x_i)`` per coordinate, for candidate means ``mu``."""
    data = np.atleast_2d(np.asarray(data, float))
    ones = np.asarray(weights, float) @ data
    mu = np.asarray(mu, float)[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(ones > 0, ones * np.log(mu), 0.0) + np.where(ones < 1, (1 - ones) * np.log1p(-mu), 0.0)
    return val


def grid_decoder_argmax(data, weights, step: float = 0.001) -> np.ndarray:
    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    scores = expected_bernoulli_loglik(grid, data, weights)
    return grid[np.argmax(scores, axis=0)]


# --------------------------------------------------------------------------
# conjugate linear-Gaussian model


class LinearGaussianDecoder(Module):
    """``p(x|z) = N(x; z A^T + b, noise_var I)``."""

    def __init__(self, A, b, noise_var: float):
        A = np.asarray(A, float)
        self.A_t = Tensor(A.T.copy(), requires_grad=True, name="lg.A_t")
        self.b = Tensor(np.asarray(b, float), requires_grad=True, name="lg.b")
        self.noise_var = float(noise_var)

    @property
    def latent_dim(self) -> int:
        return self.A_t.shape[0]

    def parameters(self):
        return {self.A_t.name: self.A_t, self.b.name: self.b}

    def log_likelihood(self, z, x):
        resid = x - (z @ self.A_t + self.b)
        per = -0.5 * (math.log(2 * math.pi * self.noise_var)) - 0.5 * (resid * resid) / self.noise_var
        return per.sum(axis=-1)


class LinearGaussianEncoder(Module):
    """Affine mean and input-independent variance."""

    def __init__(self, W, c, var):
        self.W = Tensor(np.asarray(W, float), requires_grad=True, name="lge.W")
        self.c = Tensor(np.asarray(c, float), requires_grad=True, name="lge.c")
        self.var = Tensor(np.asarray(var, float), requires_grad=True, name="lge.var")

    @property
    def latent_dim(self) -> int:
        return self.W.shape[1]

    def parameters(self):
        return {self.W.name: self.W, self.c.name: self.c, self.var.name: self.var}

    def __call__(self, x) -> DiagGaussian:
        x = np.atleast_2d(np.asarray(x, float))
        mean = x @ self.W + self.c
        return DiagGaussian(mean, self.var * np.ones((len(x), self.latent_dim)))


@dataclass
class LinearGaussianModel:
    """``z ~ N(0, I)``, ``x = A z + b + noise``; exact Gaussian posteriors."""

    A: np.ndarray
    b: np.ndarray
    noise_var: float

    @classmethod
    def make(cls, obs_dim: int = 3, latent_dim: int = 2, seed: int = 0, noise_var: float = 0.5, scale=(0.5, 2.0)):
        """Orthogonal columns of ``A`` make every posterior diagonal."""
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((obs_dim, latent_dim)))
        A = q[:, :latent_dim] * rng.uniform(*scale, size=latent_dim)
        return cls(A, rng.normal(0.0, 0.5, size=obs_dim), noise_var)

    @classmethod
    def factorized(cls, obs_dim: int = 3, latent_dim: int = 2, noise_var: float = 0.5):
        return cls(np.zeros((obs_dim, latent_dim)), np.zeros(obs_dim), noise_var)

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.A.shape[0]

    def log_marginal(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        cov = self.A @ self.A.T + self.noise_var * np.eye(self.obs_dim)
        diff = x - self.b
        _, logdet = np.linalg.slogdet(cov)
        maha = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(cov), diff)
        return -0.5 * (self.obs_dim * LOG_2PI + logdet + maha)

    def posterior_cov(self) -> np.ndarray:
        prec = np.eye(self.latent_dim) + self.A.T @ self.A / self.noise_var
        return np.linalg.inv(prec)

    def posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means ``(n, D)`` and the diagonal variance ``(D,)``."""
        cov = self.posterior_cov()
        off = cov - np.diag(np.diag(cov))
        if np.max(np.abs(off)) > 1e-10:
            raise ValueError("posterior covariance is not diagonal for this A")
        x = np.atleast_2d(np.asarray(x, float))
        mean = (x - self.b) @ self.A @ cov / self.noise_var
        return mean, np.diag(cov).copy()

    def posterior_naturals(self, x) -> np.ndarray:
        mean, var = self.posterior(x)
        return gaussian_to_natural(mean, np.broadcast_to(var, mean.shape))

    def sample(self, n: int, rng) -> np.ndarray:
        z = rng.standard_normal((n, self.latent_dim))
        return z @ self.A.T + self.b + math.sqrt(self.noise_var) * rng.standard_normal((n, self.obs_dim))

    def decoder(self) -> LinearGaussianDecoder:
        return LinearGaussianDecoder(self.A, self.b, self.noise_var)

    def exact_encoder(self) -> LinearGaussianEncoder:
        cov = self.posterior_cov()
        W = self.A @ cov / self.noise_var
        return LinearGaussianEncoder(W, -self.b @ W, np.diag(cov).copy())


# --------------------------------------------------------------------------
# denoising regularizer strength


@dataclass
class MonteCarloEstimate:
    value: float
    stderr: float
    samples: np.ndarray | None = None

    def __float__(self) -> float:
        return self.value


def denoising_regularizer_value(
    model: LinearGaussianModel,
    dataset,
    sigma: float,
    mc: int,
    seed: int,
    norm_mode: str = "squared",
) -> MonteCarloEstimate:
    """``E_x E_eps KL(f*_sigma(x + eps) || p(z|x))`` with the kernel optimum.

    Every noise draw perturbs the whole dataset; the per-draw dataset mean
    is the Monte Carlo sample. Equal seeds give paired estimates across
    ``sigma``.
    """
    if mc < 100:
        raise ValueError("mc must be at least 100")
    x = np.atleast_2d(np.asarray(dataset, float))
    posts = SyntheticPosteriorSet(x, model.posterior_naturals(x))
    noise = np.random.default_rng(seed).standard_normal((mc, *x.shape))
    eta = optimal_denoising_inference(x + sigma * noise, posts, sigma, norm_mode)
    kl = natural_kl("diag-gaussian", eta, posts.naturals)
    per_draw = kl.mean(axis=1)
    return MonteCarloEstimate(float(per_draw.mean()), float(per_draw.std(ddof=1) / math.sqrt(mc)), per_draw)


# --------------------------------------------------------------------------
# marginalized versus conditional auxiliary-variable bounds


@dataclass
class GaussianToyModel:
    """``z ~ N(0, 1)``, ``x | z ~ N(z, obs_var)`` at one observed ``x``."""

    x: float = 1.0
    obs_var: float = 0.5

    def log_joint(self, z) -> np.ndarray:
        z = np.asarray(z, float)
        return -LOG_2PI - 0.5 * np.log(self.obs_var) - 0.5 * z**2 - 0.5 * (self.x - z) ** 2 / self.obs_var

    def log_marginal(self) -> float:
        v = 1.0 + self.obs_var
        return -0.5 * (LOG_2PI + math.log(v)) - 0.5 * self.x**2 / v


@dataclass
class MixtureNoiseModel:
    """Discrete auxiliary ``z'`` with Gaussian ``q(z|z') = N(center, tau^2)``."""

    centers: np.ndarray
    probs: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        self.centers = np.atleast_1d(np.asarray(self.centers, float))
        self.probs = np.atleast_1d(np.asarray(self.probs, float))
        if self.centers.shape != self.probs.shape or not math.isclose(self.probs.sum(), 1.0):
            raise ValueError("probs must match centers and sum to one")

    def component_log_density(self, z, j) -> np.ndarray:
        return -0.5 * (LOG_2PI + 2 * math.log(self.tau)) - 0.5 * (z - self.centers[j]) ** 2 / self.tau**2

    def marginal_log_density(self, z) -> np.ndarray:
        z = np.asarray(z, float)[..., None]
        comp = -0.5 * (LOG_2PI + 2 * math.log(self.tau)) - 0.5 * (z - self.centers) ** 2 / self.tau**2
        return logsumexp(comp + np.log(self.probs), axis=-1)


@dataclass
class AuxBoundEstimate:
    L_a: float
    L_b: float
    se_a: float
    se_b: float
    gap: float
    gap_se: float


def auxiliary_bound_gap(toy: GaussianToyModel, noise: MixtureNoiseModel, samples: int, seed: int) -> AuxBoundEstimate:
    """Monte Carlo estimates of the marginalized bound and the conditional bound.

    Both use the same draws ``z' ~ q(z'|x)``, ``z ~ q(z|z')``, so the gap
    estimate ``L_a - L_b`` is paired.
    """
    if samples < 1000:
        raise ValueError("samples must be at least 1000")
    rng = np.random.default_rng(seed)
    j = rng.choice(len(noise.centers), size=samples, p=noise.probs)
    z = noise.centers[j] + noise.tau * rng.standard_normal(samples)
    joint = toy.log_joint(z)
    la = joint - noise.marginal_log_density(z)
    lb = joint - noise.component_log_density(z, j)
    gap = la - lb
    root = math.sqrt(samples)
    return AuxBoundEstimate(
        float(la.mean()),
        float(lb.mean()),
        float(la.std(ddof=1) / root),
        float(lb.std(ddof=1) / root),
        float(gap.mean()),
        float(gap.std(ddof=1) / root),
    )


def expected_component_kl(noise: MixtureNoiseModel) -> float:
    """``E_{z'} KL(q(z|z') || q(z|x))`` by adaptive quadrature."""
    total = 0.0
    for j, (c, p) in enumerate(zip(noise.centers, noise.probs)):

        def integrand(z, j=j):
            lc = noise.component_log_density(z, j)
            return math.exp(lc) * (lc - float(noise.marginal_log_density(z)))

        width = 12.0 * noise.tau
        val, _ = integrate.quad(integrand, c - width, c + width, limit=200)
        total += p * val
    return total


# --------------------------------------------------------------------------
# importance-sample ordering


@dataclass
class KOrdering:
    ks: list[int]
    means: np.ndarray
    diff_means: np.ndarray
    diff_stderrs: np.ndarray


def bound_by_k(decoder, x, q: DiagGaussian, ks, draws: int, seed: int, chunk: int = 500) -> KOrdering:
    """Paired k-sample bounds: every k reuses the first k of ``max(ks)`` draws.

    ``x`` is a small batch with proposals ``q``; the per-draw sample is the
    batch-mean bound.
    """
    from .objectives import iwae_log_weights
    from .tensor import no_grad

    ks = sorted(ks)
    kmax = ks[-1]
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(np.asarray(x, float))
    per_k = {k: [] for k in ks}
    with no_grad():
        for start in range(0, draws, chunk):
            c = min(chunk, draws - start)
            noise = rng.standard_normal((kmax, c, len(x), q.dim))
            lw = iwae_log_weights(decoder, x, q, noise).data
            for k in ks:
                per_k[k].append((logsumexp(lw[:k], axis=0) - math.log(k)).mean(axis=-1))
    values = np.stack([np.concatenate(per_k[k]) for k in ks])
    diffs = np.diff(values, axis=0)
    return KOrdering(
        ks,
        values.mean(axis=1),
        diffs.mean(axis=1),
        diffs.std(axis=1, ddof=1) / math.sqrt(draws),
    )
