import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowlab.priors import (GMMPrior, RobustPrior, SmoothedPrior, SplitPrior, prior_from_dict,
                            prior_logprob, prior_sample, split_partition)


def grid(dim, lim, n):
    g = np.linspace(-lim, lim, n)
    if dim == 1:
        return g[:, None], g[1] - g[0]
    xx, yy = np.meshgrid(g, g)
    return np.column_stack([xx.ravel(), yy.ravel()]), (g[1] - g[0]) ** 2


def integral(prior, y, lim=10.0, n=801):
    pts, w = grid(prior.dim, lim, n)
    return np.exp(prior_logprob(prior, pts, y)).sum() * w


def test_gmm_at_mode():
    p = GMMPrior(np.zeros((1, 2)), np.zeros((1, 2)))
    assert prior_logprob(p, np.zeros(2), 0) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_laplace_at_mode():
    p = RobustPrior("laplace", np.zeros((1, 1)), np.zeros((1, 1)))
    assert prior_logprob(p, np.zeros(1), 0) == pytest.approx(math.log(0.5), abs=1e-12)


def test_smoothed_eps_zero_reduces_to_base():
    rng = np.random.default_rng(0)
    base = GMMPrior(rng.normal(size=(3, 2)), 0.2 * rng.normal(size=(3, 2)))
    sm = SmoothedPrior(base, 0.0)
    z = rng.normal(size=(50, 2))
    np.testing.assert_allclose(sm.logprob_all(z), base.logprob_all(z), rtol=0, atol=1e-12)


def test_smoothed_formula():
    rng = np.random.default_rng(1)
    base = GMMPrior(rng.normal(size=(3, 2)), np.zeros((3, 2)))
    eps = 0.3
    sm = SmoothedPrior(base, eps)
    z = rng.normal(size=(5, 2))
    p = np.exp(base.logprob_all(z))
    for y in range(3):
        want = (1 - eps) * p[:, y] + eps / 2 * (p.sum(axis=1) - p[:, y])
        np.testing.assert_allclose(np.exp(sm.logprob(z, y)), want, rtol=1e-12)


def make_priors(dim, rng):
    c = 2
    loc = rng.uniform(-1, 1, size=(c, dim))
    ls = rng.uniform(-0.3, 0.3, size=(c, dim))
    return {
        "gmm": GMMPrior(loc, ls),
        "laplace": RobustPrior("laplace", loc, ls),
        "gauss_laplace": RobustPrior("gauss_laplace", loc, ls, weight=0.4, gauss_log_std=-ls),
        "smoothed": SmoothedPrior(GMMPrior(loc, ls), 0.2),
    }


@pytest.mark.parametrize("dim", [1, 2])
def test_light_tailed_priors_normalize(dim):
    for name, p in make_priors(dim, np.random.default_rng(dim)).items():
        for y in range(2):
            assert abs(integral(p, y) - 1.0) < 0.02, name


@pytest.mark.parametrize("family", ["cauchy", "gauss_cauchy"])
@pytest.mark.parametrize("dim", [1, 2])
def test_cauchy_priors_normalize_with_analytic_tails(family, dim):
    p = RobustPrior(family, np.zeros((1, dim)), np.zeros((1, dim)), weight=0.5)
    lim = 200.0
    inside_cauchy = (2 / math.pi * math.atan(lim)) ** dim
    w = p.weight if p.mixture else 0.0
    # the Gaussian part lies entirely inside the grid
    expected_inside = w + (1 - w) * inside_cauchy
    got = integral(p, 0, lim=lim, n=8001 if dim == 1 else 2001)
    assert abs(got / expected_inside - 1.0) < 0.05


def test_split_prior_factorization_and_normalization():
    rng = np.random.default_rng(0)
    p = SplitPrior(2, 3, hidden=(5,), rng=rng)
    for arr in p.params().values():
        arr += 0.3 * rng.standard_normal(arr.shape)
    z = rng.normal(size=(20, 3))
    zs, zn = split_partition(z, 2)
    for y in range(2):
        total = p.logprob(z, y)
        parts = p.logprob_split_all(zs)[:, y] + p.logprob_rest(zn, zs, y)
        np.testing.assert_allclose(total, parts, rtol=0, atol=1e-12)
    # z_s factor is an isotropic Gaussian around the anchor
    np.testing.assert_allclose(
        p.logprob_split_all(np.array([[5.0, 0.0]]))[0, 0], -math.log(2 * math.pi), atol=1e-12)
    # z_n factor integrates to one for any fixed z_s
    g = np.linspace(-30, 30, 20001)
    for zs0 in ([5.0, 0.0], [0.3, 4.0]):
        zs_rep = np.tile(zs0, (len(g), 1))
        dens = np.exp(p.logprob_rest(g[:, None], zs_rep, 1))
        assert abs(dens.sum() * (g[1] - g[0]) - 1.0) < 0.02


def test_split_prior_requires_room_for_anchors():
    with pytest.raises(ValueError):
        SplitPrior(3, 4, n_split=2)
    with pytest.raises(ValueError):
        SplitPrior(2, 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), perm_seed=st.integers(0, 100))
def test_gmm_class_symmetry(seed, perm_seed):
    rng = np.random.default_rng(seed)
    c, d = 4, 3
    mu, ls = rng.normal(size=(c, d)), 0.3 * rng.normal(size=(c, d))
    perm = np.random.default_rng(perm_seed).permutation(c)
    z = rng.normal(size=(10, d))
    a = GMMPrior(mu, ls).logprob_all(z)
    b = GMMPrior(mu[perm], ls[perm]).logprob_all(z)
    np.testing.assert_allclose(b, a[:, perm], rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(e1=st.floats(0.0, 0.98), e2=st.floats(0.0, 0.98), seed=st.integers(0, 1000))
def test_smoothed_monotone_at_class_mean(e1, e2, seed):
    lo, hi = sorted((e1, e2))
    rng = np.random.default_rng(seed)
    base = GMMPrior(rng.normal(size=(3, 2)), np.zeros((3, 2)))
    for y in range(3):
        mu = base.means[y]
        assert SmoothedPrior(base, hi).logprob(mu, y) <= SmoothedPrior(base, lo).logprob(mu, y) + 1e-12


def test_split_partition():
    zs, zn = split_partition(np.array([1.0, 2.0, 3.0, 4.0]), 2)
    np.testing.assert_array_equal(zs, [1, 2])
    np.testing.assert_array_equal(zn, [3, 4])
    z = np.random.default_rng(0).normal(size=(6, 5))
    np.testing.assert_array_equal(np.concatenate(split_partition(z, 3), axis=-1), z)
    for bad in (0, 4, 5):
        with pytest.raises(ValueError):
            split_partition(np.zeros(4), bad)


def test_gmm_degenerate_sampling():
    p = GMMPrior(np.array([[1.0, -2.0]]), np.full((1, 2), math.log(1e-8)))
    z = prior_sample(p, 0, np.random.default_rng(0), n=5)
    np.testing.assert_allclose(z, [[1.0, -2.0]] * 5, atol=1e-6)


def test_gmm_sample_mean_within_clt_bound():
    mu = np.array([[0.5, -1.0], [2.0, 3.0]])
    p = GMMPrior(mu, np.log(np.array([[1.0, 2.0], [1.0, 1.0]])))
    n = 100_000
    z = p.sample(0, n, np.random.default_rng(0))
    sigma = np.array([1.0, 2.0])
    assert np.all(np.abs(z.mean(axis=0) - mu[0]) < 3 * sigma / math.sqrt(n))


def test_laplace_sample_mean():
    p = RobustPrior("laplace", np.array([[1.0, -1.0]]), np.zeros((1, 2)))
    z = p.sample(0, 100_000, np.random.default_rng(0))
    # Laplace(0, 1) has std sqrt(2)
    assert np.all(np.abs(z.mean(axis=0) - [1.0, -1.0]) < 3 * math.sqrt(2) / math.sqrt(1e5))


def test_cauchy_flagged_heavy_tailed():
    assert RobustPrior("cauchy", np.zeros((1, 1)), np.zeros((1, 1))).heavy_tailed
    assert RobustPrior("gauss_cauchy", np.zeros((1, 1)), np.zeros((1, 1))).heavy_tailed
    assert not RobustPrior("laplace", np.zeros((1, 1)), np.zeros((1, 1))).heavy_tailed


def test_split_samples_cluster_at_anchor():
    p = SplitPrior(3, 6, anchor=5.0, rng=0)
    z = p.sample(1, 20_000, np.random.default_rng(1))
    np.testing.assert_allclose(z[:, :3].mean(axis=0), [0.0, 5.0, 0.0], atol=0.05)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        RobustPrior("laplace", np.zeros((1, 1)), np.zeros((1, 1)), weight=1.5)
    with pytest.raises(ValueError):
        RobustPrior("student", np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        SmoothedPrior(GMMPrior(np.zeros((2, 1)), np.zeros((2, 1))), 1.0)
    with pytest.raises(ValueError):
        GMMPrior(np.zeros((1, 1)), np.zeros((1, 1))).logprob(np.zeros(1), 1)


def test_prior_dict_round_trip():
    rng = np.random.default_rng(0)
    priors = list(make_priors(2, rng).values()) + [
        RobustPrior("cauchy", rng.normal(size=(2, 2)), np.zeros((2, 2))),
        SplitPrior(2, 4, rng=rng)]
    z = rng.normal(size=(7, priors[-1].dim))
    for p in priors:
        zz = z[:, : p.dim] if p.dim <= z.shape[1] else None
        q = prior_from_dict(p.to_dict())
        np.testing.assert_array_equal(q.logprob_all(zz), p.logprob_all(zz))
