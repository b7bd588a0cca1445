"""Reference distributions: 1D quadrature densities, direct mixture sampling and
belief-propagation marginals of discretised TV-L2 models."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import lfilter
from scipy.special import logsumexp

from . import prox as P
from .potentials import ScalarFunction, _as_scalar_fn, diffusion_potential_1d, QuadratureSpec

log = logging.getLogger(__name__)

DEFAULT_GRID = (-10.0, 10.0, 4001)


class BoundaryMassError(ValueError):
    pass


@dataclass
class GridDensity:
    """Normalised density tabulated on a uniform grid (piecewise linear in between)."""

    lo: float
    hi: float
    values: np.ndarray
    log_partition: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size < 2 or not self.hi > self.lo:
            raise ValueError("invalid grid")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("density values must be finite and nonnegative")

    @property
    def n_points(self):
        return self.values.size

    @property
    def x(self):
        return np.linspace(self.lo, self.hi, self.values.size)

    @property
    def step(self):
        return (self.hi - self.lo) / (self.values.size - 1)

    def mass(self):
        return float(np.trapezoid(self.values, dx=self.step))

    def __call__(self, x):
        return np.interp(x, self.x, self.values, left=0.0, right=0.0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "value"])
            for xi, vi in zip(self.x, self.values):
                w.writerow([repr(float(xi)), repr(float(vi))])


def _grid(grid):
    lo, hi, n = grid
    n = int(n)
    if n < 2 or not hi > lo:
        raise ValueError(f"invalid grid {grid}")
    return float(lo), float(hi), n, np.linspace(lo, hi, n)


def density_from_potential_values(lo, hi, u, boundary_tol=1e-10):
    """Normalise ``exp(-u)`` tabulated on a uniform grid."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("potential is not finite on the grid")
    umin = u.min()
    w = np.exp(-(u - umin))
    if max(w[0], w[-1]) >= boundary_tol:
        raise BoundaryMassError(
            f"exp(-U) at the grid boundary is {max(w[0], w[-1]):.2e} of its peak; widen the grid")
    h = (hi - lo) / (u.size - 1)
    z = np.trapezoid(w, dx=h)
    return GridDensity(lo, hi, w / z, log_partition=float(math.log(z) - umin))


def density_1d(U, grid=DEFAULT_GRID, boundary_tol=1e-10):
    """Normalised ``exp(-U)`` on ``grid = (lo, hi, n)`` by trapezoid quadrature."""
    lo, hi, _, x = _grid(grid)
    return density_from_potential_values(lo, hi, np.asarray(U(x), dtype=float), boundary_tol)


def moreau_envelope_1d(G, t, x, use_prox=True):
    """Moreau envelope of a scalar potential.

    Uses the function's own prox when it has one (closed form or compiled) and
    ``use_prox`` is set, otherwise global numerical minimisation.
    """
    fn = _as_scalar_fn(G)
    x = np.asarray(x, dtype=float)
    if use_prox and fn.prox is not None:
        p = fn.prox_at(x, t)
    else:
        p = P.prox_scalar_numeric(fn.value, x, t, grad=None if _nan_grad(fn) else fn.grad,
                                   scale=fn.scale)
    return fn.value(p) + (x - p) ** 2 / (2.0 * t)


def _nan_grad(fn):
    g = np.asarray(fn.grad(np.array([0.5])))
    return not np.all(np.isfinite(g))


def moreau_density_1d(G, t, grid=DEFAULT_GRID, boundary_tol=1e-10):
    lo, hi, _, x = _grid(grid)
    return density_from_potential_values(lo, hi, moreau_envelope_1d(G, t, x), boundary_tol)


def diffusion_density_1d(G, t, temperature, grid=DEFAULT_GRID, quadrature=None,
                         boundary_tol=1e-10):
    """``exp(-G^t_T)`` normalised on the grid."""
    lo, hi, _, x = _grid(grid)
    u = diffusion_potential_1d(G, t, temperature, x, quadrature or QuadratureSpec())
    return density_from_potential_values(lo, hi, u, boundary_tol)


def partition_curve(G, t_list, grid=DEFAULT_GRID):
    """``[(t, Z_t)]`` with ``Z_t`` the grid integral of ``exp(-M_G^t)``; ``t = 0`` uses G."""
    fn = _as_scalar_fn(G)
    lo, hi, _, x = _grid(grid)
    out = []
    for t in t_list:
        u = fn.value(x) if t == 0 else moreau_envelope_1d(fn, t, x)
        out.append((float(t), float(np.exp(density_from_potential_values(lo, hi, u).log_partition))))
    return out


def laplace_difference_reference(grid=DEFAULT_GRID):
    """Density proportional to ``exp(-|x|)``."""
    return density_1d(np.abs, grid)


def sample_gmm(weights, means, sigmas, n, rng):
    """Exact i.i.d. draws: categorical component, then normal."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("mixture weights must be nonnegative and sum to 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    comp = rng.choice(w.size, size=n, p=w / w.sum())
    return np.asarray(means, dtype=float)[comp] + np.asarray(sigmas, dtype=float)[comp] * rng.standard_normal(n)


# ---------------------------------------------------------------------------
# Belief propagation
# ---------------------------------------------------------------------------


@dataclass
class MarginalSet:
    """Per-site distributions over a common uniform label grid."""

    labels: np.ndarray
    marginals: np.ndarray
    site_semantics: str = "site"
    approximate: bool = False
    converged: bool = True
    residual: float = 0.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        self.marginals = np.asarray(self.marginals, dtype=float)
        if self.marginals.ndim != 2 or self.marginals.shape[1] != self.labels.size:
            raise ValueError("marginals must be (n_sites, n_labels)")
        sums = self.marginals.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise ValueError("marginals must each sum to 1")

    def __len__(self):
        return self.marginals.shape[0]

    def density(self, site):
        """Site marginal as a GridDensity on the label grid."""
        p = self.marginals[site]
        h = self.labels[1] - self.labels[0]
        z = np.trapezoid(p, dx=h)
        return GridDensity(float(self.labels[0]), float(self.labels[-1]), p / z)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.site_semantics, "x", "value"])
            for i, row in enumerate(self.marginals):
                for xi, vi in zip(self.labels, row):
                    w.writerow([i, repr(float(xi)), repr(float(vi))])


def default_labels(y, n_labels=501, margin=1.0):
    y = np.asarray(y, dtype=float)
    return (float(y.min() - margin), float(y.max() + margin), int(n_labels))


@dataclass
class ChainMRFSpec:
    y: np.ndarray
    sigma: float
    lam: float
    labels: Optional[tuple] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.labels is None:
            self.labels = default_labels(self.y)
        if int(self.labels[2]) < 2:
            raise ValueError("need at least two labels")

    def label_values(self):
        lo, hi, L = self.labels
        return np.linspace(lo, hi, int(L))

    def covers_data(self):
        lo, hi, _ = self.labels
        return lo <= self.y.min() - 6 * self.sigma and hi >= self.y.max() + 6 * self.sigma


@dataclass
class GridMRFSpec:
    y: np.ndarray
    sigma: float
    lam: float
    labels: Optional[tuple] = None

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.labels is None:
            self.labels = default_labels(self.y)
        if int(self.labels[2]) < 2:
            raise ValueError("need at least two labels")

    def label_values(self):
        lo, hi, L = self.labels
        return np.linspace(lo, hi, int(L))


def bp_chain_marginals(spec):
    """Exact sum-product marginals on a chain, computed in the log domain."""
    ell = spec.label_values()
    y = spec.y
    log_unary = -((ell[None, :] - y[:, None]) ** 2) / (2 * spec.sigma**2)
    log_pair = -spec.lam * np.abs(ell[:, None] - ell[None, :])
    d = y.size
    alpha = np.empty_like(log_unary)
    beta = np.zeros_like(log_unary)
    alpha[0] = log_unary[0] - logsumexp(log_unary[0])
    for i in range(1, d):
        a = log_unary[i] + logsumexp(alpha[i - 1][:, None] + log_pair, axis=0)
        alpha[i] = a - logsumexp(a)
    for i in range(d - 2, -1, -1):
        b = logsumexp(log_pair + (log_unary[i + 1] + beta[i + 1])[None, :], axis=1)
        beta[i] = b - logsumexp(b)
    lm = alpha + beta
    lm -= logsumexp(lm, axis=1, keepdims=True)
    m = np.exp(lm)
    m /= m.sum(axis=1, keepdims=True)
    return MarginalSet(ell, m, site_semantics="site")


def _laplace_conv(h, r):
    """``out[b] = sum_a h[a] r^|a-b|`` along the last axis in O(L)."""
    f = lfilter([1.0], [1.0, -r], h, axis=-1)
    g = lfilter([1.0], [1.0, -r], h[..., ::-1], axis=-1)[..., ::-1]
    return f + g - h


def _normalise(m):
    s = m.sum(axis=-1, keepdims=True)
    bad = ~(s > 0)
    if np.any(bad):
        m = np.where(bad, 1.0, m)
        s = m.sum(axis=-1, keepdims=True)
    return m / s


def bp_grid_marginals(spec, damping=0.5, max_sweeps=500, tol=1e-6):
    """Damped loopy sum-product on a 4-connected grid.

    Messages are updated in parallel; iteration stops when the largest
    message change is below ``tol``. Marginals are returned (flagged
    approximate) even without convergence.
    """
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    ell = spec.label_values()
    L = ell.size
    M, N = spec.y.shape
    r = math.exp(-spec.lam * (ell[1] - ell[0]))
    lu = -((ell[None, None, :] - spec.y[..., None]) ** 2) / (2 * spec.sigma**2)
    phi = np.exp(lu - lu.max(axis=-1, keepdims=True))
    # incoming messages at each site, by the side they arrive from
    ones = np.full((M, N, L), 1.0 / L)
    m_left, m_right, m_up, m_down = ones.copy(), ones.copy(), ones.copy(), ones.copy()
    has_l = np.zeros((M, N, 1), bool); has_l[:, 1:] = True
    has_r = np.zeros((M, N, 1), bool); has_r[:, :-1] = True
    has_u = np.zeros((M, N, 1), bool); has_u[1:, :] = True
    has_d = np.zeros((M, N, 1), bool); has_d[:-1, :] = True
    m_left = np.where(has_l, m_left, 1.0)
    m_right = np.where(has_r, m_right, 1.0)
    m_up = np.where(has_u, m_up, 1.0)
    m_down = np.where(has_d, m_down, 1.0)

    residual = math.inf
    converged = False
    for sweep in range(max_sweeps):
        new_left = np.ones_like(m_left)
        new_right = np.ones_like(m_right)
        new_up = np.ones_like(m_up)
        new_down = np.ones_like(m_down)
        if N > 1:
            # to the right neighbour: exclude what came from the right
            h = phi * m_left * m_up * m_down
            new_left[:, 1:] = _normalise(_laplace_conv(_normalise(h[:, :-1]), r))
            h = phi * m_right * m_up * m_down
            new_right[:, :-1] = _normalise(_laplace_conv(_normalise(h[:, 1:]), r))
        if M > 1:
            h = phi * m_up * m_left * m_right
            new_up[1:, :] = _normalise(_laplace_conv(_normalise(h[:-1, :]), r))
            h = phi * m_down * m_left * m_right
            new_down[:-1, :] = _normalise(_laplace_conv(_normalise(h[1:, :]), r))
        residual = 0.0
        upd = []
        for old, new, has in ((m_left, new_left, has_l), (m_right, new_right, has_r),
                              (m_up, new_up, has_u), (m_down, new_down, has_d)):
            blended = np.where(has, (1 - damping) * new + damping * old, 1.0)
            residual = max(residual, float(np.max(np.abs(blended - old))))
            upd.append(blended)
        m_left, m_right, m_up, m_down = upd
        if residual < tol:
            converged = True
            break
    if not converged:
        log.warning("loopy BP did not converge in %d sweeps (residual %.2e)", max_sweeps, residual)
    b = _normalise(phi * m_left * m_right * m_up * m_down)
    b = b.reshape(M * N, L)
    b /= b.sum(axis=1, keepdims=True)
    return MarginalSet(ell, b, site_semantics="pixel", approximate=True,
                       converged=converged, residual=residual)
