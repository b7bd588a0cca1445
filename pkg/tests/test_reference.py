import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from daz import metrics as M
from daz import potentials as PT
from daz import reference as R


def enumerate_chain_marginals(y, sigma, lam, labels):
    ell = np.linspace(*labels[:2], int(labels[2]))
    d = len(y)
    marg = np.zeros((d, ell.size))
    logs = []
    idxs = list(itertools.product(range(ell.size), repeat=d))
    for idx in idxs:
        v = ell[list(idx)]
        logs.append(-np.sum((v - y) ** 2) / (2 * sigma**2) - lam * np.sum(np.abs(np.diff(v))))
    logs = np.array(logs)
    w = np.exp(logs - logs.max())
    w /= w.sum()
    for wi, idx in zip(w, idxs):
        for i, k in enumerate(idx):
            marg[i, k] += wi
    return marg


def test_chain_bp_matches_enumeration():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 4))
        L = int(rng.integers(2, 26))
        y = rng.normal(size=d)
        sigma = float(rng.uniform(0.2, 1.5))
        lam = float(rng.uniform(0.1, 5.0))
        labels = (float(y.min() - 1), float(y.max() + 1), L)
        bp = R.bp_chain_marginals(R.ChainMRFSpec(y, sigma, lam, labels))
        worst = max(worst, float(np.max(np.abs(bp.marginals - enumerate_chain_marginals(
            y, sigma, lam, labels)))))
    assert worst < 1e-10


def test_grid_bp_on_a_single_row_is_exact():
    rng = np.random.default_rng(1)
    y = rng.normal(size=12)
    labels = (float(y.min() - 1), float(y.max() + 1), 41)
    chain = R.bp_chain_marginals(R.ChainMRFSpec(y, 0.5, 2.0, labels))
    grid = R.bp_grid_marginals(R.GridMRFSpec(y[None, :], 0.5, 2.0, labels), tol=1e-12,
                               max_sweeps=5000)
    assert grid.approximate
    np.testing.assert_allclose(grid.marginals, chain.marginals, atol=1e-8)


def test_grid_bp_close_to_enumeration_on_2x2():
    y = np.array([[0.2, 0.9], [-0.3, 0.5]])
    sigma, lam, L = 0.6, 1.0, 9
    labels = (-1.5, 2.0, L)
    ell = np.linspace(-1.5, 2.0, L)
    marg = np.zeros((4, L))
    for idx in itertools.product(range(L), repeat=4):
        v = ell[list(idx)].reshape(2, 2)
        e = (np.sum((v - y) ** 2) / (2 * sigma**2)
             + lam * (np.abs(np.diff(v, axis=0)).sum() + np.abs(np.diff(v, axis=1)).sum()))
        for i, k in enumerate(idx):
            marg[i, k] += math.exp(-e)
    marg /= marg.sum(axis=1, keepdims=True)
    bp = R.bp_grid_marginals(R.GridMRFSpec(y, sigma, lam, labels), tol=1e-12, max_sweeps=5000)
    assert bp.converged
    # loopy BP is approximate; on a single 4-cycle it is close but not exact
    assert np.max(np.abs(bp.marginals - marg)) < 0.05


def test_label_coverage():
    y = np.array([0.0, 1.0])
    assert R.ChainMRFSpec(y, 0.1, 1.0, R.default_labels(y, 11, 1.0)).covers_data()
    assert not R.ChainMRFSpec(y, 0.5, 1.0, R.default_labels(y, 11, 1.0)).covers_data()


def test_marginal_set_validation():
    with pytest.raises(ValueError):
        R.MarginalSet(np.linspace(0, 1, 3), np.array([[0.5, 0.5, 0.5]]))


def test_density_1d_normalised_and_boundary_check():
    d = R.density_1d(lambda x: 0.5 * x**2)
    assert abs(d.mass() - 1.0) < 1e-12
    assert abs(d.log_partition - 0.5 * math.log(2 * math.pi)) < 1e-8
    with pytest.raises(R.BoundaryMassError):
        R.density_1d(lambda x: 0.01 * x**2)


def test_laplace_reference():
    d = R.density_1d(np.abs, boundary_tol=1e-4)
    x = d.x
    np.testing.assert_allclose(d.values, 0.5 * np.exp(-np.abs(x)), rtol=1e-4)


def test_moreau_density_abs_tv_increases_with_t():
    base = R.density_1d(np.abs, boundary_tol=1e-4)
    tvs = [M.tv_distance(R.moreau_density_1d(PT.ABS, t, boundary_tol=1e-4), base)
           for t in (0.01, 0.1, 1.0)]
    assert tvs[0] < tvs[1] < tvs[2]


def test_diffusion_density_converges_to_moreau_density():
    m = R.moreau_density_1d(PT.ABS, 0.5, boundary_tol=1e-4)
    tvs = [M.tv_distance(R.diffusion_density_1d("abs", 0.5, T, boundary_tol=1e-4), m)
           for T in (1e-1, 1e-2, 1e-3)]
    assert tvs[0] > tvs[1] > tvs[2]


def test_partition_curve_lipschitz_in_t():
    curve = R.partition_curve(PT.GMM4, [0.0, 0.01, 0.02, 0.05, 0.1])
    z = np.array([c[1] for c in curve])
    t = np.array([c[0] for c in curve])
    assert np.all(np.diff(z) > 0)
    assert np.max(np.abs(np.diff(z) / np.diff(t))) < 100


def test_sample_gmm_moments_and_reproducibility():
    w, mu, sd = PT.GMM_WEIGHTS, PT.GMM_MEANS, PT.GMM_SIGMAS
    a = R.sample_gmm(w, mu, sd, 200000, np.random.default_rng(3))
    b = R.sample_gmm(w, mu, sd, 200000, np.random.default_rng(3))
    assert np.array_equal(a, b)
    mean = sum(wi * mi for wi, mi in zip(w, mu))
    var = sum(wi * (si**2 + mi**2) for wi, mi, si in zip(w, mu, sd)) - mean**2
    assert abs(a.mean() - mean) < 0.01
    assert abs(a.var() - var) < 0.02
    with pytest.raises(ValueError):
        R.sample_gmm([0.5, 0.6], [0, 1], [1, 1], 10, 0)


@given(st.floats(0.05, 3.0), st.floats(0.1, 10.0), st.integers(1, 3))
def test_chain_bp_rows_normalised(sigma, lam, d):
    y = np.linspace(-1, 1, d)
    bp = R.bp_chain_marginals(R.ChainMRFSpec(y, sigma, lam, (-2.0, 2.0, 15)))
    np.testing.assert_allclose(bp.marginals.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(bp.marginals >= 0)


def laplace_moreau_tv_quad(t, half=10.0):
    # independent oracle: Huber envelope in closed form, both densities
    # renormalised on [-half, half], integrated with adaptive quadrature
    from scipy import integrate

    def huber(x):
        return x * x / (2 * t) if x <= t else x - t / 2

    kw = dict(points=[t], limit=500, epsabs=1e-14, epsrel=1e-12)
    z_t = 2 * integrate.quad(lambda x: math.exp(-huber(x)), 0, half, **kw)[0]
    z = 2 * (1 - math.exp(-half))
    f = lambda x: abs(math.exp(-huber(x)) / z_t - math.exp(-x) / z)
    return 2 * integrate.quad(f, 0, half, **kw)[0]


@pytest.mark.parametrize("t", [0.001, 0.01, 0.1, 1.0])
def test_laplace_moreau_tv_matches_quad_oracle(t):
    grid = (-10.0, 10.0, 200001)
    base = R.density_1d(np.abs, grid, boundary_tol=1e-4)
    tv = M.tv_distance(R.moreau_density_1d(PT.ABS, t, grid, boundary_tol=1e-4), base)
    assert tv == pytest.approx(laplace_moreau_tv_quad(t), rel=1e-3, abs=1e-8)


def test_envelope_uses_closed_form_prox_when_available():
    x = np.linspace(-5, 5, 1001)
    for t in (1e-3, 0.1, 2.0):
        np.testing.assert_allclose(R.moreau_envelope_1d(PT.GMM4, t, x),
                                   R.moreau_envelope_1d(PT.GMM4, t, x, use_prox=False), atol=1e-12)
        np.testing.assert_allclose(R.moreau_envelope_1d(PT.ABS, t, x),
                                   np.where(np.abs(x) <= t, x**2 / (2 * t), np.abs(x) - t / 2),
                                   atol=1e-14)
