"""Split potentials U = F + G and Moreau-envelope calculus.

States are arrays whose last axis has length ``dim``; any leading axes are a
batch (typically one row per Markov chain).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from . import prox as P


# ---------------------------------------------------------------------------
# Scalar functions (1D building blocks, selectable by name in configs)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalarFunction:
    """A nonnegative scalar potential with optional exact prox.

    ``prox(x, t)`` returns ``prox_{t g}(x)``; when absent a global numerical
    prox is used. ``rho`` is the weak-convexity modulus (0 for convex).
    """

    name: str
    value: Callable
    grad: Callable
    prox: Optional[Callable] = None
    rho: float = 0.0
    scale: Optional[float] = None  # smallest feature width, bounds the numeric prox grid spacing

    def __call__(self, x):
        return self.value(x)

    def prox_at(self, x, t):
        if self.prox is not None:
            return self.prox(np.asarray(x, dtype=float), t)
        return P.prox_scalar_numeric(self.value, x, t, grad=self.grad, scale=self.scale)


def _sign0(x):
    # minimal-norm subgradient of |.|: sign(0) = 0
    return np.sign(x)


ABS = ScalarFunction("abs", np.abs, _sign0, prox=lambda x, t: P.prox_l1(x, 1.0, t))
QUADRATIC = ScalarFunction(
    "quadratic",
    lambda x: 0.5 * np.asarray(x, dtype=float) ** 2,
    lambda x: np.asarray(x, dtype=float),
    prox=lambda x, t: np.asarray(x, dtype=float) / (1.0 + t),
)
ZERO = ScalarFunction(
    "zero",
    lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    prox=lambda x, t: np.array(x, dtype=float),
)

GMM_WEIGHTS = (0.2, 0.2, 0.3, 0.3)
GMM_MEANS = (-2.0, -1.0, 1.0, 2.0)
GMM_SIGMAS = (0.05, 0.25, 0.25, 0.1)


def gaussian_mixture(weights=GMM_WEIGHTS, means=GMM_MEANS, sigmas=GMM_SIGMAS, name="gmm"):
    """Negative log-density of a 1D Gaussian mixture, shifted to be nonnegative.

    The shift is ``log sum_i w_i / (sigma_i sqrt(2 pi))``, an upper bound on the
    density, so the potential is >= 0 and the Gibbs measure is unchanged.
    """
    w = np.asarray(weights, dtype=float)
    mu = np.asarray(means, dtype=float)
    sd = np.asarray(sigmas, dtype=float)
    if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
        raise ValueError("mixture weights must be nonnegative and sum to 1")
    logc = np.log(w) - np.log(sd) - 0.5 * math.log(2 * math.pi)
    shift = float(logsumexp(logc))

    def _logcomp(x):
        x = np.asarray(x, dtype=float)[..., None]
        return logc - 0.5 * ((x - mu) / sd) ** 2

    def value(x):
        return shift - logsumexp(_logcomp(x), axis=-1)

    def grad(x):
        lc = _logcomp(x)
        r = np.exp(lc - logsumexp(lc, axis=-1, keepdims=True))
        xx = np.asarray(x, dtype=float)[..., None]
        return np.sum(r * (xx - mu) / sd**2, axis=-1)

    def prox(x, t):
        return P.prox_gaussian_mixture(x, t, logc, mu, sd, shift)

    return ScalarFunction(name, value, grad, prox=prox, scale=float(sd.min()))


GMM4 = gaussian_mixture(name="gmm4")

SCALAR_FUNCTIONS = {f.name: f for f in (ABS, QUADRATIC, ZERO, GMM4)}


def scalar_function(name):
    try:
        return SCALAR_FUNCTIONS[name]
    except KeyError:
        raise KeyError(f"unknown scalar function {name!r}; known: {sorted(SCALAR_FUNCTIONS)}") from None


# ---------------------------------------------------------------------------
# Potential terms
# ---------------------------------------------------------------------------


class Term:
    """One component of a split potential acting on arrays ``(..., dim)``."""

    dim: int

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError(f"{type(self).__name__} has no gradient")

    def subgrad(self, x):
        return self.grad(x)

    def prox(self, x, t):
        raise NotImplementedError(f"{type(self).__name__} has no prox")


class ZeroTerm(Term):
    def __init__(self, dim):
        self.dim = int(dim)

    def value(self, x):
        return np.zeros(np.shape(x)[:-1])

    def grad(self, x):
        return np.zeros(np.shape(x))

    def prox(self, x, t):
        return np.array(x, dtype=float)


class QuadraticTerm(Term):
    """``||x - y||^2 / (2 sigma^2)``; with ``y = 0, sigma = 1`` the standard Gaussian."""

    def __init__(self, y, sigma=1.0):
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.sigma = float(sigma)
        self.dim = self.y.size

    @property
    def lipschitz(self):
        return 1.0 / self.sigma**2

    def value(self, x):
        return 0.5 * np.sum((np.asarray(x) - self.y) ** 2, axis=-1) / self.sigma**2

    def grad(self, x):
        return (np.asarray(x) - self.y) / self.sigma**2

    def prox(self, x, t):
        return P.prox_quadratic(x, self.y, self.sigma, t)


class L1Term(Term):
    def __init__(self, dim, weight=1.0):
        self.dim = int(dim)
        self.weight = float(weight)

    def value(self, x):
        return self.weight * np.sum(np.abs(x), axis=-1)

    def subgrad(self, x):
        return self.weight * _sign0(np.asarray(x, dtype=float))

    def prox(self, x, t):
        return P.prox_l1(x, self.weight, t)


class TVChainTerm(Term):
    """``weight * sum_i |x[i+1] - x[i]|``."""

    def __init__(self, dim, weight=1.0):
        self.dim = int(dim)
        self.weight = float(weight)

    def value(self, x):
        return self.weight * np.sum(np.abs(np.diff(x, axis=-1)), axis=-1)

    def subgrad(self, x):
        s = _sign0(np.diff(np.asarray(x, dtype=float), axis=-1))
        v = np.zeros(np.shape(x))
        v[..., 1:] += s
        v[..., :-1] -= s
        return self.weight * v

    def prox(self, x, t):
        return P.prox_tv1d(x, self.weight, t)


class AnisoTVTerm(Term):
    """Anisotropic TV of an image stored row-major in a flat state vector."""

    def __init__(self, shape, weight=1.0, tolerance=1e-6, max_iters=2000, method="accelerated"):
        self.shape = tuple(int(s) for s in shape)
        self.dim = self.shape[0] * self.shape[1]
        self.weight = float(weight)
        self.tolerance = tolerance
        self.max_iters = max_iters
        self.method = method

    def _img(self, x):
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + self.shape)

    def value(self, x):
        return self.weight * P.tv2d_aniso(self._img(x))

    def subgrad(self, x):
        img = self._img(x)
        v = np.zeros_like(img)
        sr = _sign0(np.diff(img, axis=-1))
        v[..., :, 1:] += sr
        v[..., :, :-1] -= sr
        sc = _sign0(np.diff(img, axis=-2))
        v[..., 1:, :] += sc
        v[..., :-1, :] -= sc
        return self.weight * v.reshape(np.shape(x))

    def prox(self, x, t):
        out = P.prox_tv2d_aniso(self._img(x), self.weight, t,
                                tolerance=self.tolerance, max_iters=self.max_iters,
                                method=self.method)
        return out.reshape(np.shape(x))


class SeparableTerm(Term):
    """Sum of a scalar function over coordinates."""

    def __init__(self, fn, dim=1):
        self.fn = scalar_function(fn) if isinstance(fn, str) else fn
        self.dim = int(dim)

    def value(self, x):
        return np.sum(self.fn.value(np.asarray(x, dtype=float)), axis=-1)

    def grad(self, x):
        return self.fn.grad(np.asarray(x, dtype=float))

    def prox(self, x, t):
        return self.fn.prox_at(x, t)


# ---------------------------------------------------------------------------
# Split potential
# ---------------------------------------------------------------------------


@dataclass
class SplitPotential:
    dim: int
    F: Term
    G: Term
    lip_grad_F: Optional[float] = None
    rho_G: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        for term in (self.F, self.G):
            if term.dim != self.dim:
                raise ValueError(f"term dimension {term.dim} != potential dimension {self.dim}")

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.dim,):
            raise ValueError(f"expected trailing dimension {self.dim}, got shape {x.shape}")
        return x

    def energy(self, x):
        x = self._check(x)
        return self.F.value(x) + self.G.value(x)

    def grad_F(self, x):
        return self.F.grad(self._check(x))

    def subgrad_G(self, x):
        return self.G.subgrad(self._check(x))

    def prox_G(self, x, t):
        if not t > 0:
            raise ValueError(f"Moreau parameter must be positive, got {t}")
        return self.G.prox(self._check(x), t)

    def moreau_grad(self, x, t):
        """Gradient of ``F + M_G^t``."""
        x = self._check(x)
        return self.F.grad(x) + (x - self.G.prox(x, t)) / t

    def max_prox_parameter(self):
        """Largest t for which the prox is guaranteed single-valued."""
        if not self.rho_G:
            return math.inf
        return 1.0 / self.rho_G


def eval_split(potential, x):
    """Return ``(F(x), G(x), grad F(x))`` for a single state."""
    x = potential._check(x)
    f_val = float(potential.F.value(x))
    g_val = float(potential.G.value(x))
    if not (math.isfinite(f_val) and math.isfinite(g_val)):
        raise ValueError(f"non-finite energy (F={f_val}, G={g_val}); invalid potential configuration")
    if f_val < -1e-12 or g_val < -1e-12:
        raise ValueError(f"negative energy (F={f_val}, G={g_val}); potentials must be nonnegative")
    return f_val, g_val, potential.F.grad(x)


@dataclass(frozen=True)
class MoreauPoint:
    t: float
    x: np.ndarray
    prox_point: np.ndarray
    envelope_value: np.ndarray
    envelope_grad: np.ndarray


def moreau_eval(potential, t, x):
    """Prox point, Moreau envelope value and gradient of G at ``x``.

    Works for a single state or a batch along leading axes.
    """
    if not t > 0:
        raise ValueError(f"Moreau parameter must be positive, got {t}")
    x = potential._check(x)
    p = potential.G.prox(x, t)
    r = x - p
    val = potential.G.value(p) + 0.5 * np.sum(r * r, axis=-1) / t
    return MoreauPoint(t=t, x=x, prox_point=p, envelope_value=val, envelope_grad=r / t)


def moreau_time_derivative(potential, t, x):
    """``d/dt M_G^t(x) = -||x - prox_{tG}(x)||^2 / (2 t^2)``."""
    mp = moreau_eval(potential, t, x)
    r = mp.x - mp.prox_point
    return -0.5 * np.sum(r * r, axis=-1) / t**2


# ---------------------------------------------------------------------------
# Nonconvexity functional
# ---------------------------------------------------------------------------


def nonconvexity_triples(domain_box, n_samples, rng_seed, max_corner_dim=8):
    """Deterministic (x, y, lambda) triples: box corners plus a Latin hypercube."""
    lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in domain_box)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ValueError("empty domain box")
    d = lo.size
    xs, ys, lams = [], [], []
    if d <= max_corner_dim:
        corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        corners = lo + corners * (hi - lo)
        for a in corners:
            for b in corners:
                for lam in (0.0, 0.5, 1.0):
                    xs.append(a)
                    ys.append(b)
                    lams.append(lam)
    if n_samples > 0:
        u = qmc.LatinHypercube(d=2 * d + 1, seed=rng_seed).random(n_samples)
        xs.extend(lo + u[:, :d] * (hi - lo))
        ys.extend(lo + u[:, d:2 * d] * (hi - lo))
        lams.extend(u[:, -1])
    return np.array(xs), np.array(ys), np.array(lams)


def nonconvexity_estimate(H, domain_box, n_samples, rng_seed):
    """Lower estimate of ``sup H(lx + (1-l)y) - l H(x) - (1-l) H(y)``, clipped at 0.

    ``H`` maps ``(n, d)`` arrays to ``(n,)``. The triples depend only on
    ``(domain_box, n_samples, rng_seed)`` so different functions are compared
    on matched sample sets.
    """
    x, y, lam = nonconvexity_triples(domain_box, n_samples, rng_seed)
    lam_ = lam[:, None]
    gap = H(lam_ * x + (1 - lam_) * y) - lam * H(x) - (1 - lam) * H(y)
    return max(0.0, float(np.max(gap)))


# ---------------------------------------------------------------------------
# Diffusion (finite temperature) potential in 1D
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureSpec:
    """Composite Simpson rule on a window around the query point.

    The half-width is ``width_sigmas * sqrt(T t) + span``; ``span=None`` uses
    ``sqrt(2 t G(x))``, which bounds the distance from ``x`` to any prox point
    of a nonnegative ``G``. The window is doubled until the integrand at both
    ends is below ``tail_tol`` times its peak.
    """

    n_nodes: int = 4001
    width_sigmas: float = 12.0
    span: Optional[float] = None
    tail_tol: float = 1e-12
    max_expansions: int = 30

    def __post_init__(self):
        if self.n_nodes < 3 or self.n_nodes % 2 == 0:
            raise ValueError("Simpson quadrature needs an odd number of nodes >= 3")


def _as_scalar_fn(G):
    if isinstance(G, str):
        return scalar_function(G)
    if isinstance(G, ScalarFunction):
        return G
    return ScalarFunction(getattr(G, "__name__", "custom"), G, lambda x: np.full_like(x, np.nan))


def _simpson_log_weights(n, h):
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return np.log(w * h / 3.0)


def _diffusion_quadrature(G, t, T, x, quad):
    """Return (log integral, posterior mean) of ``exp(-(G(y) + (x-y)^2/(2t)) / T)``."""
    if not (t > 0 and T > 0):
        raise ValueError("t and temperature must be positive")
    fn = _as_scalar_fn(G)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    gx = np.asarray(fn.value(x), dtype=float)
    span = np.sqrt(2 * t * np.maximum(gx, 0.0)) if quad.span is None else np.full_like(x, quad.span)
    half = quad.width_sigmas * math.sqrt(T * t) + span
    lse = np.empty_like(x)
    mean = np.empty_like(x)
    u = np.linspace(-1.0, 1.0, quad.n_nodes)
    log_tail = math.log(quad.tail_tol)
    todo = np.arange(x.size)
    for _ in range(quad.max_expansions + 1):
        xs = x[todo, None]
        y = xs + half[todo, None] * u
        logf = -(fn.value(y) + (xs - y) ** 2 / (2 * t)) / T
        if not np.all(np.isfinite(logf.max(axis=1))):
            raise ValueError("divergent or non-finite integrand")
        peak = logf.max(axis=1)
        ok = (logf[:, 0] - peak < log_tail) & (logf[:, -1] - peak < log_tail)
        h = half[todo] * (u[1] - u[0])
        logw = _simpson_log_weights(quad.n_nodes, 1.0)[None, :] + np.log(h)[:, None]
        a = logf + logw
        lz = logsumexp(a, axis=1)
        wts = np.exp(a - lz[:, None])
        lse[todo[ok]] = lz[ok]
        mean[todo[ok]] = np.sum(wts * y, axis=1)[ok]
        todo = todo[~ok]
        if todo.size == 0:
            return lse, mean
        half[todo] *= 2.0
    raise ValueError("quadrature window did not capture the integrand tails; integrand may diverge")


def diffusion_potential_1d(G, t, temperature, x, quadrature=None):
    """Finite-temperature diffusion potential ``G^t_T(x)`` (scalar or array ``x``)."""
    quad = quadrature or QuadratureSpec()
    scalar = np.ndim(x) == 0
    lse, _ = _diffusion_quadrature(G, t, temperature, x, quad)
    T = temperature
    out = -T * (lse - 0.5 * math.log(2 * math.pi * T * t))
    return float(out[0]) if scalar else out


def diffusion_score_1d(G, t, temperature, x, quadrature=None):
    """``d/dx G^t_T(x) = (x - E[Y | x]) / t`` under the tilted posterior."""
    quad = quadrature or QuadratureSpec()
    scalar = np.ndim(x) == 0
    _, mean = _diffusion_quadrature(G, t, temperature, x, quad)
    out = (np.atleast_1d(np.asarray(x, dtype=float)) - mean) / t
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Ready-made potentials used by the experiments
# ---------------------------------------------------------------------------


def scalar_potential(fn, dim=1):
    """``F = 0``, ``G = sum_i fn(x_i)``."""
    fn = scalar_function(fn) if isinstance(fn, str) else fn
    return SplitPotential(dim, ZeroTerm(dim), SeparableTerm(fn, dim), lip_grad_F=0.0,
                          rho_G=fn.rho, name=fn.name)


def gaussian_potential(dim=1):
    """``G = ||x||^2 / 2`` with ``F = 0``; ``pi^t = N(0, (1 + t) I)``."""
    return SplitPotential(dim, ZeroTerm(dim), QuadraticTerm(np.zeros(dim), 1.0),
                          lip_grad_F=0.0, rho_G=0.0, name="gaussian")


def laplace_potential():
    return scalar_potential(ABS)


def gmm_potential(weights=GMM_WEIGHTS, means=GMM_MEANS, sigmas=GMM_SIGMAS, rho=None):
    fn = gaussian_mixture(weights, means, sigmas)
    return SplitPotential(1, ZeroTerm(1), SeparableTerm(fn, 1), lip_grad_F=0.0,
                          rho_G=rho, name="gmm")


def tv_prior_potential(dim=10, weight=1.0):
    return SplitPotential(dim, ZeroTerm(dim), TVChainTerm(dim, weight), lip_grad_F=0.0,
                          rho_G=0.0, name="tv-prior")


def tv_chain_potential(y, sigma, lam):
    y = np.asarray(y, dtype=float)
    F = QuadraticTerm(y, sigma)
    return SplitPotential(y.size, F, TVChainTerm(y.size, lam), lip_grad_F=F.lipschitz,
                          rho_G=0.0, name="tv-chain")


def tv_image_potential(y_img, sigma, lam, tolerance=1e-6):
    y_img = np.asarray(y_img, dtype=float)
    F = QuadraticTerm(y_img.reshape(-1), sigma)
    G = AnisoTVTerm(y_img.shape, lam, tolerance=tolerance)
    return SplitPotential(F.dim, F, G, lip_grad_F=F.lipschitz, rho_G=0.0, name="tv-image")
