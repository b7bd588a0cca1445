import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from daz import potentials as PT
from daz import reference as R


def test_scalar_function_lookup():
    assert PT.scalar_function("abs") is PT.ABS
    with pytest.raises(KeyError):
        PT.scalar_function("nope")


def test_gmm_constants_and_normalisation():
    x = np.linspace(-10, 10, 200001)
    # G is the negative log of the mixture density plus a constant shift
    shift = math.log(sum(w / (s * math.sqrt(2 * math.pi))
                         for w, s in zip(PT.GMM_WEIGHTS, PT.GMM_SIGMAS)))
    dens = np.exp(shift - PT.GMM4.value(x))
    assert abs(np.trapezoid(dens, x) - 1.0) < 1e-8
    assert np.all(PT.GMM4.value(x) >= 0)


def test_eval_split_rejects_negative_energy():
    class Neg(PT.ZeroTerm):
        def value(self, x):
            return -np.ones(np.shape(x)[:-1])

    pot = PT.SplitPotential(2, Neg(2), PT.L1Term(2))
    with pytest.raises(ValueError):
        PT.eval_split(pot, np.zeros(2))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        PT.SplitPotential(3, PT.ZeroTerm(2), PT.L1Term(3))
    pot = PT.laplace_potential()
    with pytest.raises(ValueError):
        pot.energy(np.zeros((4, 2)))


def test_moreau_abs_closed_form():
    pot = PT.laplace_potential()
    x = np.linspace(-3, 3, 61)[:, None]
    t = 0.4
    mp = PT.moreau_eval(pot, t, x)
    ax = np.abs(x[:, 0])
    huber = np.where(ax <= t, ax**2 / (2 * t), ax - t / 2)
    np.testing.assert_allclose(mp.envelope_value, huber, atol=1e-14)
    np.testing.assert_allclose(mp.envelope_grad[:, 0], np.clip(x[:, 0] / t, -1, 1), atol=1e-14)


def _fd_grad(fun, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("t", [0.05, 0.3, 2.0])
def test_moreau_gradient_matches_finite_differences_tv_chain(t):
    rng = np.random.default_rng(11)
    pot = PT.tv_prior_potential(8, 1.5)
    for _ in range(5):
        x = rng.normal(scale=2.0, size=8)
        g = PT.moreau_eval(pot, t, x).envelope_grad
        fd = _fd_grad(lambda z: float(PT.moreau_eval(pot, t, z).envelope_value), x, 1e-6)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(g), 1e-12)


@pytest.mark.parametrize("t", [1e-3, 0.1, 1.0])
def test_moreau_gradient_matches_finite_differences_gmm(t):
    pot = PT.gmm_potential()
    for x0 in (-2.5, -1.4, 0.3, 0.9, 2.7):
        x = np.array([x0])
        g = PT.moreau_eval(pot, t, x).envelope_grad
        fd = _fd_grad(lambda z: float(PT.moreau_eval(pot, t, z).envelope_value), x, 1e-6)
        assert abs(g[0] - fd[0]) <= 1e-4 * max(abs(g[0]), 1e-8)


@pytest.mark.parametrize("name", ["abs", "gmm4", "quadratic"])
def test_hamilton_jacobi_residual(name):
    # d/dt M^t(x) + |grad M^t(x)|^2 / 2 = 0, d/dt by a fourth-order central stencil;
    # the grid is offset so that no point sits on the |x| = t kink of the abs envelope
    pot = PT.scalar_potential(name)
    x = (np.linspace(-3, 3, 37) + 0.013)[:, None]
    h = 1e-4
    for t in (0.05, 0.5):
        m = {k: PT.moreau_eval(pot, t + k * h, x).envelope_value for k in (-2, -1, 1, 2)}
        dt = (-m[2] + 8 * m[1] - 8 * m[-1] + m[-2]) / (12 * h)
        grad = PT.moreau_eval(pot, t, x).envelope_grad[:, 0]
        assert np.max(np.abs(dt + 0.5 * grad**2)) < 1e-6
        np.testing.assert_allclose(PT.moreau_time_derivative(pot, t, x), -0.5 * grad**2, atol=1e-14)


def grid_nonconvexity(h_values, z):
    """sup over grid triples z_i < z_k < z_j of H(z_k) - lam H(z_i) - (1 - lam) H(z_j)."""
    n = z.size
    best = 0.0
    k = np.arange(n)
    for i in range(n - 2):
        j = np.arange(i + 2, n)
        lam = (z[j][None, :] - z[k][:, None]) / (z[j] - z[i])[None, :]
        ok = (k[:, None] > i) & (k[:, None] < j[None, :])
        gap = h_values[:, None] - lam * h_values[i] - (1 - lam) * h_values[j][None, :]
        best = max(best, float(np.max(np.where(ok, gap, -np.inf))))
    return best


@pytest.mark.parametrize("t", [1e-3, 1e-2, 0.1, 1.0])
def test_moreau_envelope_reduces_nonconvexity(t):
    fn = PT.GMM4
    z = np.linspace(-3, 3, 601)
    nc_g = grid_nonconvexity(fn.value(z), z)
    nc_m = grid_nonconvexity(R.moreau_envelope_1d(fn, t, z), z)
    assert nc_g > 0
    assert nc_m <= nc_g + 1e-9


@pytest.mark.parametrize("t", [0.1, 1.0])
def test_sampled_nonconvexity_estimate_ordering(t):
    fn = PT.GMM4
    box = ([-3.0], [3.0])
    nc_g = PT.nonconvexity_estimate(lambda X: fn.value(X[:, 0]), box, 4000, 123)
    nc_m = PT.nonconvexity_estimate(lambda X: R.moreau_envelope_1d(fn, t, X[:, 0]), box, 4000, 123)
    assert nc_m <= nc_g


def test_nonconvexity_zero_for_convex():
    box = ([-2.0, -2.0], [2.0, 2.0])
    pot = PT.tv_prior_potential(2)
    assert PT.nonconvexity_estimate(pot.energy, box, 500, 0) < 1e-12


def test_nonconvexity_triples_deterministic():
    a = PT.nonconvexity_triples(([-1.0], [1.0]), 50, 7)
    b = PT.nonconvexity_triples(([-1.0], [1.0]), 50, 7)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_gaussian_partition_function():
    for t, z in R.partition_curve("quadratic", [0.0, 0.5, 1.0, 2.0], grid=(-40.0, 40.0, 16001)):
        assert abs(z - math.sqrt(2 * math.pi * (1 + t))) < 1e-8


def test_gaussian_moreau_is_gaussian_with_variance_one_plus_t():
    pot = PT.gaussian_potential(1)
    x = np.linspace(-4, 4, 9)[:, None]
    for t in (0.1, 1.0):
        np.testing.assert_allclose(PT.moreau_eval(pot, t, x).envelope_value,
                                   x[:, 0] ** 2 / (2 * (1 + t)), atol=1e-14)


def test_max_prox_parameter():
    assert PT.laplace_potential().max_prox_parameter() == math.inf
    assert PT.gmm_potential(rho=4.0).max_prox_parameter() == 0.25


def test_diffusion_potential_approaches_envelope():
    x = np.linspace(-3, 3, 61)
    t = 0.5
    m = R.moreau_envelope_1d(PT.ABS, t, x)
    dm = np.clip(x / t, -1, 1)
    errs, gerrs = [], []
    for T in (1e-1, 1e-2, 1e-3):
        errs.append(np.max(np.abs(PT.diffusion_potential_1d("abs", t, T, x) - m)))
        gerrs.append(np.max(np.abs(PT.diffusion_score_1d("abs", t, T, x) - dm)))
    assert errs[0] > errs[1] > errs[2]
    assert gerrs[0] > gerrs[1] > gerrs[2]


def test_diffusion_quadratic_closed_form():
    # G = x^2/2: G^t_T(x) = x^2 / (2(1+t)) + (T/2) log(1+t)
    x = np.linspace(-2, 2, 11)
    t, T = 0.3, 0.2
    expect = x**2 / (2 * (1 + t)) + 0.5 * T * math.log(1 + t)
    np.testing.assert_allclose(PT.diffusion_potential_1d("quadratic", t, T, x), expect, atol=1e-9)


@given(st.floats(-5, 5), st.floats(1e-3, 3.0))
def test_prox_l1_envelope_below_function(x0, t):
    pot = PT.laplace_potential()
    mp = PT.moreau_eval(pot, t, np.array([x0]))
    assert float(mp.envelope_value) <= abs(x0) + 1e-12
    assert float(mp.envelope_value) >= abs(x0) - t / 2 - 1e-12


@given(st.floats(-4, 4), st.floats(1e-3, 2.0), st.floats(1e-3, 2.0))
def test_envelope_decreasing_in_t(x0, t1, t2):
    lo, hi = sorted((t1, t2))
    a = R.moreau_envelope_1d(PT.GMM4, lo, np.array([x0]))
    b = R.moreau_envelope_1d(PT.GMM4, hi, np.array([x0]))
    assert b[0] <= a[0] + 1e-10
