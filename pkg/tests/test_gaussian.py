import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from i2c import gaussian as G
from i2c.errors import SingularCovariance

from conftest import random_spd


def test_canonical_identity():
    nu, Lam = G.canonical(G.Gaussian(np.zeros(3), np.eye(3)))
    np.testing.assert_array_equal(nu, np.zeros(3))
    np.testing.assert_allclose(Lam, np.eye(3), atol=1e-15)


def test_canonical_scalar():
    nu, Lam = G.canonical(G.Gaussian([1.0], [[4.0]]))
    np.testing.assert_allclose(nu, [0.25])
    np.testing.assert_allclose(Lam, [[0.25]])


def test_canonical_round_trip_random(rng):
    S = random_spd(rng, 3)
    mu = rng.standard_normal(3)
    nu, Lam = G.canonical(G.Gaussian(mu, S))
    np.testing.assert_allclose(Lam, np.linalg.inv(S), rtol=1e-9)
    back = G.from_canonical(nu, Lam)
    np.testing.assert_allclose(back.mean, mu, rtol=1e-9)
    np.testing.assert_allclose(back.cov, S, rtol=1e-9)


def test_canonical_singular_raises():
    with pytest.raises(SingularCovariance):
        G.canonical(G.Gaussian(np.zeros(2), np.zeros((2, 2))))


def test_jitter_retry_counted():
    G.reset_jitter_count()
    # PSD but numerically indefinite by a hair: rescued by the diagonal load
    S = np.array([[1.0, 1.0], [1.0, 1.0 - 1e-13]])
    L = G.cholesky(S)
    assert G.jitter_count() == 1
    assert np.all(np.isfinite(L))
    with pytest.raises(SingularCovariance):
        G.cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_constructor_symmetrizes_and_freezes():
    g = G.Gaussian([0.0, 0.0], [[1.0, 0.2], [0.2 + 1e-7, 1.0]])
    np.testing.assert_array_equal(g.cov, g.cov.T)
    with pytest.raises(ValueError):
        g.mean[0] = 1.0


def test_condition_independent_blocks():
    j = G.JointGaussian([1.0, 2.0], [3.0], np.diag([2.0, 3.0]), [[1.0]], np.zeros((2, 1)))
    c = G.condition(j, [10.0])
    np.testing.assert_allclose(c.mean, [1.0, 2.0])
    np.testing.assert_allclose(c.cov, np.diag([2.0, 3.0]))


def test_condition_perfect_correlation():
    j = G.JointGaussian([0.0], [0.0], [[1.0]], [[1.0]], [[1.0]])
    c = G.condition(j, [0.7])
    np.testing.assert_allclose(c.mean, [0.7])
    np.testing.assert_allclose(c.cov, [[0.0]], atol=1e-15)


def test_condition_matches_grid_density(rng):
    S = random_spd(rng, 4)
    mu = rng.standard_normal(4)
    joint = G.Gaussian(mu, S)
    b = mu[2:] + np.array([0.4, -0.3])
    c = G.condition(G.JointGaussian.from_full(mu, S, 2), b)

    # brute force: evaluate the joint density on an a-grid at fixed b
    sd = np.sqrt(np.diag(S[:2, :2]))
    g0 = np.linspace(mu[0] - 7 * sd[0], mu[0] + 7 * sd[0], 401)
    g1 = np.linspace(mu[1] - 7 * sd[1], mu[1] + 7 * sd[1], 401)
    A0, A1 = np.meshgrid(g0, g1, indexing="ij")
    pts = np.stack([A0.ravel(), A1.ravel(), np.full(A0.size, b[0]), np.full(A0.size, b[1])], 1)
    w = joint.pdf(pts)
    w = w / w.sum()
    a = pts[:, :2]
    m = w @ a
    C = (a - m).T @ ((a - m) * w[:, None])
    np.testing.assert_allclose(c.mean, m, atol=1e-6)
    np.testing.assert_allclose(c.cov, C, atol=1e-4)


def test_marginal_selects_block():
    j = G.JointGaussian([1.0], [2.0, 3.0], [[4.0]], np.eye(2), np.zeros((1, 2)))
    m = G.marginal(j, "a")
    np.testing.assert_array_equal(m.mean, [1.0])
    np.testing.assert_array_equal(m.cov, [[4.0]])
    # conditioning on an empty block is the identity
    empty = G.JointGaussian(j.mean_b, np.zeros(0), j.cov_b, np.zeros((0, 0)), np.zeros((2, 0)))
    c = G.condition(empty, np.zeros(0))
    np.testing.assert_allclose(c.mean, G.marginal(j, "b").mean)
    np.testing.assert_allclose(c.cov, G.marginal(j, "b").cov)
    with pytest.raises(ValueError):
        G.marginal(j, "c")


def test_marginal_matches_monte_carlo(rng):
    S = random_spd(rng, 4)
    mu = rng.standard_normal(4)
    x = G.Gaussian(mu, S).sample(rng, 1_000_000)
    m = G.marginal(G.JointGaussian.from_full(mu, S, 1), "b")
    np.testing.assert_allclose(x[:, 1:].mean(0), m.mean, atol=1e-2)
    np.testing.assert_allclose(np.cov(x[:, 1:].T), m.cov, atol=1e-2)


def test_fuse_uninformative_backward(rng):
    g = G.Gaussian(rng.standard_normal(3), random_spd(rng, 3))
    f = G.fuse(g, G.Gaussian(np.zeros(3), 1e12 * np.eye(3)))
    np.testing.assert_allclose(f.mean, g.mean, rtol=1e-3, atol=1e-9)
    np.testing.assert_allclose(f.cov, g.cov, rtol=1e-3)


def test_fuse_equal_precision():
    f = G.fuse(G.Gaussian([0.0], [[1.0]]), G.Gaussian([2.0], [[1.0]]))
    np.testing.assert_allclose(f.mean, [1.0])
    np.testing.assert_allclose(f.cov, [[0.5]])


def test_fuse_matches_woodbury_form(rng):
    Sf, Sb = random_spd(rng, 3), random_spd(rng, 3)
    mf, mb = rng.standard_normal(3), rng.standard_normal(3)
    fused = G.fuse(G.Gaussian(mf, Sf), G.Gaussian(mb, Sb))
    gain = Sf @ np.linalg.inv(Sf + Sb)
    cov = Sf - gain @ Sf
    mean = mf + gain @ (mb - mf)
    np.testing.assert_allclose(fused.cov, cov, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(fused.mean, mean, rtol=1e-9, atol=1e-12)


def test_kl_self_and_closed_form(rng):
    g = G.Gaussian(rng.standard_normal(3), random_spd(rng, 3))
    assert G.kl_divergence(g, g) == pytest.approx(0.0, abs=1e-12)
    assert G.kl_divergence(G.Gaussian([0.0], [[1.0]]), G.Gaussian([1.0], [[1.0]])) == pytest.approx(0.5)


def test_kl_matches_grid_quadrature(rng):
    Sp = 0.3 * random_spd(rng, 3)
    Sq = 0.3 * random_spd(rng, 3)
    p = G.Gaussian(0.2 * rng.standard_normal(3), Sp)
    q = G.Gaussian(0.2 * rng.standard_normal(3), Sq)
    sd = np.sqrt(np.diag(Sp))
    axes = [np.linspace(p.mean[i] - 7 * sd[i], p.mean[i] + 7 * sd[i], 121) for i in range(3)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    cell = np.prod([a[1] - a[0] for a in axes])
    lp, lq = p.logpdf(mesh), q.logpdf(mesh)
    numeric = float(np.sum(np.exp(lp) * (lp - lq)) * cell)
    assert G.kl_divergence(p, q) == pytest.approx(numeric, abs=1e-3)


def test_mahalanobis_cases(rng):
    g = G.Gaussian(np.ones(2), np.eye(2))
    assert G.mahalanobis(g, np.ones(2)) == 0.0
    assert G.mahalanobis(g, np.array([2.0, 1.0])) == pytest.approx(1.0)
    S = random_spd(rng, 4)
    mu, x = rng.standard_normal(4), rng.standard_normal(4)
    direct = (x - mu) @ np.linalg.inv(S) @ (x - mu)
    assert G.mahalanobis(G.Gaussian(mu, S), x) == pytest.approx(direct, rel=1e-9)


# property suites

seeds = st.integers(0, 2**32 - 1)


def _spd_from_seed(seed, d, cond=None):
    return random_spd(np.random.default_rng(seed), d, cond)


def _is_psd(S):
    try:
        np.linalg.cholesky(S + 1e-12 * np.eye(S.shape[0]))
        return True
    except np.linalg.LinAlgError:
        return False


@settings(max_examples=50, deadline=None)
@given(seed=seeds, d=st.integers(1, 5))
def test_fuse_commutative_associative(seed, d):
    rng = np.random.default_rng(seed)
    a, b, c = (G.Gaussian(rng.standard_normal(d), random_spd(rng, d)) for _ in range(3))
    ab, ba = G.fuse(a, b), G.fuse(b, a)
    np.testing.assert_allclose(ab.mean, ba.mean, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(ab.cov, ba.cov, rtol=1e-8, atol=1e-12)
    left, right = G.fuse(ab, c), G.fuse(a, G.fuse(b, c))
    np.testing.assert_allclose(left.mean, right.mean, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(left.cov, right.cov, rtol=1e-8, atol=1e-12)
    assert _is_psd(left.cov)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, d=st.integers(1, 6), log_cond=st.floats(0.0, 6.0))
def test_canonical_round_trip_property(seed, d, log_cond):
    S = _spd_from_seed(seed, d, 10.0**log_cond)
    mu = np.random.default_rng(seed + 1).standard_normal(d)
    back = G.from_canonical(*G.canonical(G.Gaussian(mu, S)))
    scale = np.linalg.norm(S)
    assert np.linalg.norm(back.cov - S) <= 1e-9 * scale
    assert np.linalg.norm(back.mean - mu) <= 1e-9 * max(1.0, np.linalg.norm(mu))


@settings(max_examples=50, deadline=None)
@given(seed=seeds, da=st.integers(1, 3), db=st.integers(1, 3))
def test_condition_equals_regression(seed, da, db):
    rng = np.random.default_rng(seed)
    S = random_spd(rng, da + db)
    mu = rng.standard_normal(da + db)
    j = G.JointGaussian.from_full(mu, S, da)
    b = rng.standard_normal(db)
    c = G.condition(j, b)
    coef = S[:da, da:] @ np.linalg.inv(S[da:, da:])
    np.testing.assert_allclose(c.mean, mu[:da] + coef @ (b - mu[da:]), rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(c.cov, S[:da, :da] - coef @ S[da:, :da], rtol=1e-9, atol=1e-12)
    assert _is_psd(c.cov)
    np.testing.assert_array_equal(c.cov, c.cov.T)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, d=st.integers(1, 4))
def test_kl_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    p = G.Gaussian(rng.standard_normal(d), random_spd(rng, d))
    q = G.Gaussian(rng.standard_normal(d), random_spd(rng, d))
    assert G.kl_divergence(p, q) >= 0.0
    assert math.isfinite(G.kl_divergence(p, q))
