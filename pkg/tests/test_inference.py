import numpy as np
import pytest

from i2c import inference as I
from i2c.errors import NonFinitePropagation, UnsupportedDegree
from i2c.gaussian import Gaussian

from conftest import random_spd

BACKENDS = [I.Linearize(), I.Cubature(), I.GaussHermite(3), I.MonteCarlo(200_000, seed=3)]


class Counter:
    """Counts the number of input points a vectorized map is evaluated on."""

    def __init__(self, f):
        self.f = f
        self.points = 0

    def __call__(self, x):
        x = np.asarray(x)
        self.points += 1 if x.ndim == 1 else x.shape[0]
        return self.f(x)


def test_gh_nodes_degree_two():
    nodes, weights = I.gh_nodes(2)
    np.testing.assert_allclose(np.sort(nodes), [-1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(weights, [0.5, 0.5], atol=1e-15)


@pytest.mark.parametrize("p", range(2, 11))
def test_gh_nodes_normalized_symmetric_exact(p):
    nodes, weights = I.gh_nodes(p)
    assert weights.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(np.sort(nodes), -np.sort(nodes)[::-1], atol=1e-13)
    # exact on polynomials up to degree 2p - 1; even moments of N(0,1) are (k-1)!!
    for k in range(2 * p):
        exact = 0.0 if k % 2 else float(np.prod(np.arange(k - 1, 0, -2))) if k else 1.0
        scale = weights @ np.abs(nodes) ** k
        assert weights @ nodes ** k == pytest.approx(exact, rel=1e-10, abs=1e-13 * scale)


def test_gh_fourth_moment():
    nodes, weights = I.gh_nodes(4)
    assert abs(weights @ nodes ** 4 - 3.0) < 1e-12


@pytest.mark.parametrize("p", [1, 11, 2.5])
def test_gh_nodes_rejects_degree(p):
    with pytest.raises(UnsupportedDegree):
        I.gh_nodes(p)


def test_gh_point_budget():
    with pytest.raises(UnsupportedDegree):
        I.propagate(I.GaussHermite(10), lambda x: x, Gaussian(np.zeros(7), np.eye(7)))


def test_affine_map_exact_for_all_backends(rng):
    A = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    f = lambda x: x @ A.T + b
    g = Gaussian(rng.standard_normal(3), random_spd(rng, 3))
    noise = 0.1 * np.eye(2)
    exact_mean, exact_cov, exact_xy = A @ g.mean + b, A @ g.cov @ A.T + noise, g.cov @ A.T
    for prop in BACKENDS:
        j = I.propagate(prop, f, g, noise)
        tol = 1e-8
        if isinstance(prop, I.MonteCarlo):
            # three standard errors of the sample mean and covariance
            sd = np.sqrt(np.diag(exact_cov - noise))
            tol = 3 * np.outer(sd, sd).max() * np.sqrt(2.0 / prop.n) + 3 * sd.max() / np.sqrt(prop.n)
        np.testing.assert_allclose(j.mean_b, exact_mean, atol=tol, err_msg=repr(prop))
        np.testing.assert_allclose(j.cov_b, exact_cov, atol=tol, err_msg=repr(prop))
        np.testing.assert_allclose(j.cov_ab, exact_xy, atol=tol, err_msg=repr(prop))
        np.testing.assert_array_equal(j.cov_b, j.cov_b.T)


def test_cubature_integrates_quadratic():
    j = I.propagate(I.Cubature(), lambda x: x ** 2, Gaussian([0.0], [[1.0]]))
    assert j.mean_b[0] == pytest.approx(1.0, abs=1e-15)


def test_sine_benchmark_against_monte_carlo():
    # x ~ N(0.5, 0.5^2); closed form: E sin x = sin(m) exp(-s2/2)
    m, s2 = 0.5, 0.25
    g = Gaussian([m], [[s2]])
    rng = np.random.default_rng(2024)
    x = m + np.sqrt(s2) * rng.standard_normal(1_000_000)
    y = np.sin(x)
    mc_mean, mc_var = y.mean(), y.var(ddof=1)
    exact_mean = np.sin(m) * np.exp(-s2 / 2)
    assert mc_mean == pytest.approx(exact_mean, abs=2e-3)

    gh = I.propagate(I.GaussHermite(4), np.sin, g)
    cub = I.propagate(I.Cubature(), np.sin, g)
    lin = I.propagate(I.Linearize(), np.sin, g)
    assert abs(gh.mean_b[0] - mc_mean) < 1e-3
    assert abs(gh.cov_b[0, 0] - mc_var) < 1e-2
    assert abs(cub.mean_b[0] - mc_mean) < 1e-2
    assert abs(cub.cov_b[0, 0] - mc_var) < 5e-2
    assert abs(lin.mean_b[0] - mc_mean) > abs(cub.mean_b[0] - mc_mean)


def test_cubature_tends_to_linearization_for_small_covariance(rng):
    f = lambda x: np.stack([np.sin(x[..., 0]) * x[..., 1], np.exp(0.3 * x[..., 1])], -1)
    mu = rng.standard_normal(2)
    g = Gaussian(mu, 1e-12 * random_spd(rng, 2))
    a = I.propagate(I.Cubature(), f, g)
    b = I.propagate(I.Linearize(), f, g)
    np.testing.assert_allclose(a.mean_b, b.mean_b, rtol=1e-6)
    np.testing.assert_allclose(a.cov_b, b.cov_b, rtol=1e-6)
    np.testing.assert_allclose(a.cov_ab, b.cov_ab, rtol=1e-6)


def test_gh3_matches_centered_cubature_on_quadratics():
    # 1-D: GH(3) = nodes {0, +-sqrt(3)} with weights {2/3, 1/6, 1/6}
    f = lambda x: 0.7 * x ** 2 - 1.3 * x + 0.2
    g = Gaussian([0.4], [[0.8]])
    gh = I.propagate(I.GaussHermite(3), f, g)
    L = np.sqrt(0.8)
    pts = 0.4 + L * np.array([0.0, np.sqrt(3.0), -np.sqrt(3.0)])
    w = np.array([2 / 3, 1 / 6, 1 / 6])
    y = f(pts)
    mean = w @ y
    np.testing.assert_allclose(gh.mean_b, [mean], rtol=1e-10)
    np.testing.assert_allclose(gh.cov_b, [[w @ (y - mean) ** 2]], rtol=1e-10)
    # and both agree with the exact moments of a quadratic
    exact_mean = 0.7 * (0.8 + 0.16) - 1.3 * 0.4 + 0.2
    np.testing.assert_allclose(gh.mean_b, [exact_mean], rtol=1e-10)


@pytest.mark.parametrize("n", [1, 3, 5])
def test_point_counts(n):
    g = Gaussian(np.zeros(n), np.eye(n))
    f = Counter(lambda x: np.sin(x))
    I.propagate(I.Cubature(), f, g)
    assert f.points == 2 * n
    f = Counter(lambda x: np.sin(x))
    I.propagate(I.GaussHermite(4), f, g)
    assert f.points == 4 ** n


def test_monte_carlo_seeded_and_order_free():
    f = lambda x: np.cos(x)
    g2 = Gaussian(np.zeros(2), np.eye(2))
    g3 = Gaussian(np.zeros(3), np.eye(3))
    a = I.MonteCarlo(1000, seed=5)
    first = I.propagate(a, f, g2)
    I.propagate(a, f, g3)
    b = I.MonteCarlo(1000, seed=5)
    I.propagate(b, f, g3)
    np.testing.assert_array_equal(I.propagate(b, f, g2).cov_b, first.cov_b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_points_raise():
    with pytest.raises(NonFinitePropagation):
        I.propagate(I.Cubature(), lambda x: np.log(x), Gaussian([0.0], [[1.0]]))
    with pytest.raises(NonFinitePropagation):
        I.propagate(I.Linearize(), lambda x: 1.0 / x, Gaussian([0.0], [[1.0]]))


def test_make_propagator_parsing():
    assert isinstance(I.make_propagator("cubature"), I.Cubature)
    assert I.make_propagator("gh:4").degree == 4
    assert I.make_propagator("mc:100", seed=1).n == 100
    with pytest.raises(ValueError):
        I.make_propagator("gh")
    with pytest.raises(ValueError):
        I.make_propagator("ukf")
