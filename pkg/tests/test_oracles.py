import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from air import oracles
from air.oracles import (
    ExpFamilyMember,
    GaussianToyModel,
    GridTooSmall,
    LinearGaussianModel,
    MixtureNoiseModel,
    SyntheticPosteriorSet,
)

finite = st.floats(-5, 5)
positive = st.floats(0.05, 5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(finite, positive), min_size=1, max_size=3))
def test_gaussian_natural_roundtrip(pairs):
    mean = np.array([p[0] for p in pairs])
    var = np.array([p[1] for p in pairs])
    eta = oracles.gaussian_to_natural(mean, var)
    m, v = oracles.natural_to_gaussian(eta)
    np.testing.assert_allclose(m, mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(v, var, rtol=1e-12)
    back = oracles.mean_to_natural("diag-gaussian", oracles.natural_to_mean("diag-gaussian", eta))
    np.testing.assert_allclose(back, eta, rtol=1e-9, atol=1e-9)


def test_log_partition_gradient_is_mean_parameter():
    rng = np.random.default_rng(0)
    for family, eta in [
        ("diag-gaussian", oracles.gaussian_to_natural(rng.normal(size=2), rng.uniform(0.3, 2, 2))),
        ("bernoulli", rng.normal(size=3)),
    ]:
        h = 1e-6
        grad = np.array([
            (oracles.log_partition(family, eta + h * e) - oracles.log_partition(family, eta - h * e)) / (2 * h)
            for e in np.eye(len(eta))
        ])
        np.testing.assert_allclose(grad, oracles.natural_to_mean(family, eta), rtol=1e-6, atol=1e-8)


def test_gaussian_log_partition_normalizes_density():
    eta = oracles.gaussian_to_natural(np.array([0.7]), np.array([1.3]))
    A = float(oracles.log_partition("diag-gaussian", eta))
    val, _ = integrate.quad(lambda z: math.exp(eta[0] * z + eta[1] * z * z - A), -30, 30)
    assert val == pytest.approx(1.0, abs=1e-10)


def test_domain_errors():
    with pytest.raises(ValueError):
        oracles.natural_to_gaussian(np.array([1.0, 0.5]))
    with pytest.raises(ValueError):
        oracles.mean_to_natural("bernoulli", np.array([1.0]))
    with pytest.raises(ValueError):
        oracles.mean_to_natural("diag-gaussian", np.array([2.0, 1.0]))
    with pytest.raises(ValueError):
        oracles.log_partition("poisson", np.array([1.0]))
    with pytest.raises(ValueError, match="domain"):
        SyntheticPosteriorSet(np.zeros((1, 1)), np.array([[0.0, 0.1]]))


def test_member_sufficient_statistic():
    m = ExpFamilyMember.from_mean("diag-gaussian", np.array([1.0, 3.0]))
    np.testing.assert_allclose(m.sufficient_statistic(np.array([2.0])), [2.0, 4.0])
    np.testing.assert_allclose(m.natural, oracles.gaussian_to_natural([1.0], [2.0]))


def test_bregman_kl_matches_closed_forms():
    rng = np.random.default_rng(1)
    for _ in range(200):
        mq, mp = rng.normal(size=2), rng.normal(size=2)
        vq, vp = rng.uniform(0.2, 3, 2), rng.uniform(0.2, 3, 2)
        eq, ep = oracles.gaussian_to_natural(mq, vq), oracles.gaussian_to_natural(mp, vp)
        ref = sum(
            math.log(math.sqrt(b) / math.sqrt(a)) + (a + (m1 - m2) ** 2) / (2 * b) - 0.5
            for m1, a, m2, b in zip(mq, vq, mp, vp)
        )
        assert float(oracles.bregman_kl("diag-gaussian", eq, ep)) == pytest.approx(ref, rel=1e-9, abs=1e-12)
        assert float(oracles.natural_kl("diag-gaussian", eq, ep)) == pytest.approx(ref, rel=1e-9, abs=1e-12)
        lq, lp = rng.normal(0, 2, 3), rng.normal(0, 2, 3)
        pq, pp = 1 / (1 + np.exp(-lq)), 1 / (1 + np.exp(-lp))
        refb = float(np.sum(stats.entropy(np.stack([pq, 1 - pq]), np.stack([pp, 1 - pp]), axis=0)))
        assert float(oracles.bregman_kl("bernoulli", lq, lp)) == pytest.approx(refb, rel=1e-9, abs=1e-12)


def test_kernel_weights_properties():
    rng = np.random.default_rng(2)
    pts = rng.uniform(-2, 2, size=(6, 2))
    x = rng.uniform(-2, 2, size=2)
    for mode in ("squared", "literal"):
        w = oracles.kernel_weights(x, pts, 0.7, mode)
        assert w.sum() == pytest.approx(1.0, abs=1e-14) and np.all(w > 0)
    w = oracles.kernel_weights(x, pts, 0.7)
    dens = stats.multivariate_normal(x, 0.49 * np.eye(2)).pdf(pts)
    np.testing.assert_allclose(w, dens / dens.sum(), rtol=1e-10)
    nearest = np.argmin(np.linalg.norm(pts - x, axis=1))
    assert oracles.kernel_weights(x, pts, 1e-3)[nearest] == pytest.approx(1.0)
    np.testing.assert_allclose(oracles.kernel_weights(x, pts, 1e6), 1 / 6, atol=1e-9)
    batch = oracles.kernel_weights(pts[:3], pts, 0.7)
    assert batch.shape == (3, 6)
    with pytest.raises(ValueError):
        oracles.kernel_weights(x, pts, 0.0)
    with pytest.raises(ValueError):
        oracles.kernel_weights(x, np.empty((0, 2)), 1.0)
    with pytest.raises(ValueError):
        oracles.kernel_weights(x, pts, 1.0, "cosine")


def test_single_point_optimum_is_its_posterior():
    posts = SyntheticPosteriorSet.random_gaussian(1, 2, 3, np.random.default_rng(3))
    out = oracles.optimal_denoising_inference(np.zeros(2), posts, 0.5)
    np.testing.assert_allclose(out, posts.naturals[0])


def test_brute_force_matches_closed_form():
    rng = np.random.default_rng(4)
    for _ in range(5):
        posts = SyntheticPosteriorSet.random_gaussian(3, 1, 2, rng)
        w = oracles.kernel_weights(rng.uniform(-2, 2, 1), posts.points, 1.0)
        closed = w @ posts.naturals
        grid = oracles.natural_grid(posts)
        brute = oracles.brute_force_weighted_kl_min(w, posts, grid, refine=2)
        cells = np.array([ax[1] - ax[0] for ax in grid])
        assert np.max(np.abs(brute - closed) / cells) <= 1.0
    bern = SyntheticPosteriorSet(np.zeros((3, 1)), rng.normal(size=(3, 2)), family="bernoulli")
    w = np.array([0.2, 0.5, 0.3])
    axes = [np.linspace(-6, 6, 401)] * 2
    np.testing.assert_allclose(oracles.brute_force_weighted_kl_min(w, bern, axes, refine=2), w @ bern.naturals, atol=0.03)


def test_brute_force_reports_small_grid():
    posts = SyntheticPosteriorSet(np.zeros((1, 1)), oracles.gaussian_to_natural([[3.0]], [[1.0]]))
    grid = [np.linspace(-1, 1, 11), np.linspace(-2, -0.1, 11)]
    with pytest.raises(GridTooSmall):
        oracles.brute_force_weighted_kl_min(np.ones(1), posts, grid)


def test_empirical_lipschitz_shrinks_with_sigma():
    posts = SyntheticPosteriorSet.random_gaussian(8, 2, 1, np.random.default_rng(5))
    vals = [oracles.empirical_lipschitz(posts, s, 500, seed=1) for s in (0.5, 1.0, 2.0, 4.0)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        oracles.empirical_lipschitz(posts, 1.0, 50, seed=1)


def test_linear_gaussian_model_against_scipy():
    lg = LinearGaussianModel.make(4, 2, seed=6)
    x = lg.sample(5, np.random.default_rng(7))
    cov = lg.A @ lg.A.T + lg.noise_var * np.eye(4)
    np.testing.assert_allclose(lg.log_marginal(x), stats.multivariate_normal(lg.b, cov).logpdf(x), rtol=1e-12)
    mean, var = lg.posterior(x)
    # Bayes' rule for one point, checked numerically on the joint Gaussian
    joint = np.block([[np.eye(2), lg.A.T], [lg.A, cov]])
    gain = joint[:2, 2:] @ np.linalg.inv(joint[2:, 2:])
    np.testing.assert_allclose(mean, (x - lg.b) @ gain.T, atol=1e-12)
    np.testing.assert_allclose(var, np.diag(np.eye(2) - gain @ joint[2:, :2]), atol=1e-12)
    skew = LinearGaussianModel(np.array([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2), 1.0)
    with pytest.raises(ValueError, match="diagonal"):
        skew.posterior(np.zeros((1, 2)))


def test_regularizer_estimates():
    flat = LinearGaussianModel.factorized(3, 2)
    data = flat.sample(10, np.random.default_rng(8))
    est = oracles.denoising_regularizer_value(flat, data, 1.0, 200, seed=0)
    assert est.value == pytest.approx(0.0, abs=1e-12)
    lg = LinearGaussianModel.make(3, 2, seed=9)
    data = lg.sample(10, np.random.default_rng(10))
    small = oracles.denoising_regularizer_value(lg, data, 0.5, 500, seed=1)
    big = oracles.denoising_regularizer_value(lg, data, 2.0, 500, seed=1)
    assert big.value > small.value > 0
    assert float(small) == small.value
    with pytest.raises(ValueError):
        oracles.denoising_regularizer_value(lg, data, 1.0, 10, seed=0)


def test_decoder_optimum_is_weighted_mean():
    data = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    params = {0: (np.array([0.0]), np.array([1.0])), 1: (np.array([1.0]), np.array([1.0]))}
    fn = lambda x: params[int(x[0] == 0.0)]
    z = np.array([0.3])
    r = oracles.decoder_responsibilities(z, data, fn)
    ref = stats.norm.pdf(0.3, [0.0, 1.0], 1.0)
    np.testing.assert_allclose(r, ref / ref.sum(), rtol=1e-12)
    np.testing.assert_allclose(oracles.optimal_decoder_params(z, data, fn), r @ data)
    far = lambda x: (np.array([1e4 * (1 + x[0])]), np.array([1e-6]))
    r = oracles.decoder_responsibilities(np.array([1e4]), data, far)
    assert r[1] == pytest.approx(1.0)


def test_decoder_grid_argmax():
    data = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    w = np.array([0.25, 0.5, 0.25])
    np.testing.assert_allclose(oracles.grid_decoder_argmax(data, w), [0.5, 0.25])


def test_auxiliary_variable_quantities():
    toy = GaussianToyModel(1.0, 0.5)
    z = np.linspace(-3, 3, 7)
    ref = stats.norm.logpdf(z) + stats.norm.logpdf(1.0, z, math.sqrt(0.5))
    np.testing.assert_allclose(toy.log_joint(z), ref, rtol=1e-12)
    assert toy.log_marginal() == pytest.approx(stats.norm.logpdf(1.0, 0.0, math.sqrt(1.5)))
    point = MixtureNoiseModel([0.2], [1.0], 0.5)
    assert oracles.expected_component_kl(point) == pytest.approx(0.0, abs=1e-12)
    est = oracles.auxiliary_bound_gap(toy, point, 1000, seed=0)
    assert est.L_a == est.L_b and est.gap == 0.0
    mix = MixtureNoiseModel([-1.0, 1.5], [0.3, 0.7], 0.5)
    est = oracles.auxiliary_bound_gap(toy, mix, 20000, seed=1)
    assert est.L_a >= est.L_b and est.L_a <= toy.log_marginal() + 3 * est.se_a
    # the expected component KL equals the mutual information between z and z'
    assert 0 < oracles.expected_component_kl(mix) < -(0.3 * math.log(0.3) + 0.7 * math.log(0.7))
    with pytest.raises(ValueError):
        MixtureNoiseModel([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        oracles.auxiliary_bound_gap(toy, mix, 10, seed=0)


def test_bound_by_k_reports_paired_differences():
    lg = LinearGaussianModel.make(3, 2, seed=11)
    enc = oracles.LinearGaussianEncoder(np.zeros((3, 2)), np.zeros(2), np.ones(2))
    x = lg.sample(3, np.random.default_rng(12))
    res = oracles.bound_by_k(lg.decoder(), x, enc(x), [4, 1, 2], 2000, seed=0)
    assert res.ks == [1, 2, 4]
    assert np.all(np.diff(res.means) > 0)
    np.testing.assert_allclose(res.diff_means, np.diff(res.means), atol=1e-10)
    assert res.means[-1] < np.mean(lg.log_marginal(x))
