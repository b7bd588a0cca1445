"""Proximal operators.

All solvers minimise ``0.5 * ||y - x||^2 + t * weight * R(y)`` for a seminorm or
penalty ``R``; the Moreau parameter ``t`` and the model weight are kept separate.
Batched inputs carry chains along the leading axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np


class ProxError(RuntimeError):
    """An iterative prox solver failed to reach its tolerance."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class ProxRequest:
    t: float
    x: np.ndarray
    tolerance: float = 1e-6
    max_iters: int = 200

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError("Moreau parameter must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def _check_positive(**kw):
    for name, val in kw.items():
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")


def prox_l1(x, weight, t):
    """Soft thresholding with threshold ``weight * t``."""
    _check_positive(weight=weight, t=t)
    x = np.asarray(x, dtype=float)
    thr = weight * t
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def prox_quadratic(x, y, sigma, t):
    """Prox of ``z -> ||z - y||^2 / (2 sigma^2)``."""
    _check_positive(sigma=sigma, t=t)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1:] != y.shape[-1:]:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    s2 = sigma * sigma
    return (s2 * x + t * y) / (s2 + t)


# ---------------------------------------------------------------------------
# 1D total variation: exact dynamic programming (Johnson's algorithm)
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _tv1d_inplace(y, beta, lam, x, a, b, tm, tp):
    """Exact 1D TV denoising in O(n).

    The derivative of the running cost-to-go is piecewise linear; its knots are
    kept in ``x`` with slope/offset increments ``a``/``b``. ``tm``/``tp`` are the
    back-pointer thresholds. Work arrays have length ``2n`` (knots) and ``n``.
    """
    n = y.shape[0]
    if n == 0:
        return
    if n == 1 or lam <= 0.0:
        for i in range(n):
            beta[i] = y[i]
        return
    tm[0] = -lam + y[0]
    tp[0] = lam + y[0]
    l = n - 1
    r = n
    x[l] = tm[0]
    x[r] = tp[0]
    a[l] = 1.0
    b[l] = -y[0] + lam
    a[r] = -1.0
    b[r] = y[0] + lam
    afirst = 1.0
    bfirst = -lam - y[1]
    alast = -1.0
    blast = -lam + y[1]
    for k in range(1, n - 1):
        # step up from l until the derivative exceeds -lam
        alo = afirst
        blo = bfirst
        lo = l
        while lo <= r:
            if alo * x[lo] + blo > -lam:
                break
            alo += a[lo]
            blo += b[lo]
            lo += 1
        tm[k] = (-lam - blo) / alo
        l = lo - 1
        x[l] = tm[k]
        # step down from r until the derivative is below lam
        ahi = alast
        bhi = blast
        hi = r
        while hi >= l:
            if -ahi * x[hi] - bhi < lam:
                break
            ahi += a[hi]
            bhi += b[hi]
            hi -= 1
        tp[k] = (lam + bhi) / (-ahi)
        r = hi + 1
        x[r] = tp[k]
        a[l] = alo
        b[l] = blo + lam
        a[r] = ahi
        b[r] = bhi + lam
        afirst = 1.0
        bfirst = -lam - y[k + 1]
        alast = -1.0
        blast = -lam + y[k + 1]
    # last coefficient: zero of the derivative
    alo = afirst
    blo = bfirst
    lo = l
    while lo <= r:
        if alo * x[lo] + blo > 0.0:
            break
        alo += a[lo]
        blo += b[lo]
        lo += 1
    beta[n - 1] = -blo / alo
    for k in range(n - 2, -1, -1):
        if beta[k + 1] > tp[k]:
            beta[k] = tp[k]
        elif beta[k + 1] < tm[k]:
            beta[k] = tm[k]
        else:
            beta[k] = beta[k + 1]


@numba.njit(cache=True, nogil=True)
def _tv1d_rows(inp, out, lam):
    n = inp.shape[1]
    x = np.empty(2 * n)
    a = np.empty(2 * n)
    b = np.empty(2 * n)
    tm = np.empty(max(n - 1, 1))
    tp = np.empty(max(n - 1, 1))
    for r in range(inp.shape[0]):
        _tv1d_inplace(inp[r], out[r], lam, x, a, b, tm, tp)


def prox_tv1d(signal, weight, t):
    """Exact prox of ``weight * sum |y[i+1] - y[i]|`` along the last axis.

    Leading axes are treated as a batch of independent signals.
    """
    _check_positive(weight=weight, t=t)
    arr = np.asarray(signal, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise ValueError("signal must have length >= 1")
    flat = np.ascontiguousarray(arr.reshape(-1, arr.shape[-1]))
    out = np.empty_like(flat)
    _tv1d_rows(flat, out, float(weight * t))
    return out.reshape(arr.shape)


# ---------------------------------------------------------------------------
# 2D anisotropic TV by Dykstra-like splitting over row and column chains
# ---------------------------------------------------------------------------


def _prox_cols(u, weight, t):
    return np.swapaxes(prox_tv1d(np.swapaxes(u, -1, -2), weight, t), -1, -2)


def prox_tv2d_aniso(image, weight, t, tolerance=1e-6, max_iters=200, return_info=False,
                    method="dykstra"):
    """Prox of anisotropic TV with forward differences on the last two axes.

    Both methods combine exact row-wise and column-wise 1D TV proxes.
    ``"dykstra"`` alternates them (block coordinate descent on the dual);
    ``"accelerated"`` runs FISTA on the column dual with the row block
    eliminated, which needs far fewer sweeps when ``t * weight`` is large.
    The residual is the max-abs disagreement between the row and column
    half-step iterates; iteration stops once it is ``<= tolerance``.
    Raises ProxError when ``max_iters`` sweeps do not reach the tolerance.
    """
    _check_positive(weight=weight, t=t, tolerance=tolerance)
    if method not in ("dykstra", "accelerated"):
        raise ValueError(f"unknown method {method!r}")
    img = np.asarray(image, dtype=float)
    if img.ndim < 2 or img.shape[-1] < 1 or img.shape[-2] < 1:
        raise ValueError("image must be at least 2D")
    if img.shape[-2] == 1:
        out = prox_tv1d(img, weight, t)
        return (out, [0.0]) if return_info else out
    if img.shape[-1] == 1:
        out = _prox_cols(img, weight, t)
        return (out, [0.0]) if return_info else out

    residuals = []
    if method == "dykstra":
        x = img.copy()
        p = np.zeros_like(img)
        q = np.zeros_like(img)
        for _ in range(max_iters):
            y = prox_tv1d(x + p, weight, t)
            p = x + p - y
            x = _prox_cols(y + q, weight, t)
            q = y + q - x
            res = float(np.max(np.abs(x - y)))
            residuals.append(res)
            if res <= tolerance:
                return (x, residuals) if return_info else x
    else:
        q = np.zeros_like(img)
        w = q
        theta = 1.0
        for _ in range(max_iters):
            a = prox_tv1d(img - w, weight, t)
            u = w + a
            x = _prox_cols(u, weight, t)
            res = float(np.max(np.abs(a - x)))
            residuals.append(res)
            if res <= tolerance:
                return (x, residuals) if return_info else x
            q_new = u - x
            theta_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            w = q_new + ((theta - 1.0) / theta_new) * (q_new - q)
            q, theta = q_new, theta_new
    raise ProxError(f"prox_tv2d_aniso did not converge in {max_iters} sweeps", residuals[-1])


def tv2d_aniso(image):
    """Anisotropic TV (forward differences, Neumann boundary) over the last two axes."""
    img = np.asarray(image, dtype=float)
    return (np.abs(np.diff(img, axis=-1)).sum(axis=(-2, -1))
            + np.abs(np.diff(img, axis=-2)).sum(axis=(-2, -1)))


# ---------------------------------------------------------------------------
# Accelerated proximal gradient with Lipschitz backtracking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ApgdConfig:
    max_iters: int = 500
    initial_lipschitz: float = 1.0
    backtracking_iters: int = 20
    shrink: float = 0.9
    grow: float = 2.0
    rel_tolerance: float = 1e-6

    def __post_init__(self):
        if not 0 < self.shrink < 1 < self.grow:
            raise ValueError("need 0 < shrink < 1 < grow")
        if self.rel_tolerance <= 0 or self.initial_lipschitz <= 0:
            raise ValueError("rel_tolerance and initial_lipschitz must be positive")
        if self.max_iters < 1 or self.backtracking_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class ApgdResult:
    x: np.ndarray
    iterations: int
    lipschitz: float
    backtracking_exhausted: int
    objective_trace: list


def apgd_prox(f, grad_f, prox_g, x0, config=None, g=None):
    """Minimise ``f + g`` with APGD and Lipschitz backtracking.

    ``prox_g(v, step)`` must return ``prox_{step * g}(v)``. If ``g`` is given,
    the objective ``f + g`` is traced after every accepted step.
    Returns an :class:`ApgdResult`.
    """
    cfg = config or ApgdConfig()
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(f(x))):
        raise ValueError("f is not finite at x0")
    x_prev = x.copy()
    L = float(cfg.initial_lipschitz)
    exhausted = 0
    trace = []
    k = 0
    for k in range(cfg.max_iters):
        xbar = x + (x - x_prev) / math.sqrt(2.0)
        fbar = f(xbar)
        gbar = grad_f(xbar)
        accepted = False
        for _ in range(cfg.backtracking_iters):
            x_new = prox_g(xbar - gbar / L, 1.0 / L)
            diff = x_new - xbar
            if f(x_new) <= fbar + np.vdot(gbar, diff) + 0.5 * L * np.vdot(diff, diff):
                L *= cfg.shrink
                accepted = True
                break
            L *= cfg.grow
        if not accepted:
            exhausted += 1
        if not np.all(np.isfinite(x_new)):
            raise FloatingPointError(f"APGD produced non-finite iterate at k={k}")
        if g is not None:
            trace.append(float(f(x_new) + g(x_new)))
        x_prev, x = x, x_new
        nx = np.linalg.norm(x_prev)
        step = np.linalg.norm(x_prev - x)
        if step <= cfg.rel_tolerance * nx or (nx == 0.0 and step == 0.0):
            break
    return ApgdResult(x=x, iterations=k + 1, lipschitz=L,
                      backtracking_exhausted=exhausted, objective_trace=trace)


# ---------------------------------------------------------------------------
# Numerical prox for scalar potentials applied elementwise
# ---------------------------------------------------------------------------

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section_min(func, lo, hi, tol=1e-10, max_iters=200):
    """Vectorised golden-section search of ``func`` on ``[lo, hi]`` (elementwise)."""
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc = func(c)
    fd = func(d)
    for _ in range(max_iters):
        if np.all(b - a <= tol):
            break
        left = fc < fd
        # shrink towards the smaller value
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - _INVPHI * (b - a)
        new_d = a + _INVPHI * (b - a)
        c_eval = np.where(left, new_c, d)
        d_eval = np.where(left, c, new_d)
        f_new = func(np.where(left, new_c, new_d))
        fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
        c, d = c_eval, d_eval
    x = 0.5 * (a + b)
    return x


def _grid_size(half_max, t, n_grid, scale):
    # spacing at most a quarter of both sqrt(t) and the feature scale of the potential
    spacing = 0.25 * math.sqrt(t)
    if scale is not None:
        spacing = min(spacing, 0.25 * scale)
    return max(int(n_grid), int(math.ceil(2.0 * half_max / spacing)) + 1)


def prox_scalar_numeric(value, x, t, n_grid=129, tol=1e-10, grad=None, scale=None,
                        n_candidates=3, chunk=4_000_000):
    """Global prox of a nonnegative scalar potential, elementwise in ``x``.

    Any minimiser ``p`` satisfies ``(x - p)^2 / (2t) <= value(x)`` because the
    potential is nonnegative, so a grid over that window finds the global basin.
    The grid spacing is at most ``min(sqrt(t), scale) / 4`` (``scale`` is the
    smallest feature width of the potential, if known), and the
    ``n_candidates`` lowest grid local minima are each refined by
    golden-section search; the best refined point wins (lowest grid index on
    exact ties).

    When ``grad`` is supplied the result is polished by bisection on the
    stationarity condition, which golden-section alone resolves only to
    about sqrt(machine eps).
    """
    _check_positive(t=t)
    x = np.asarray(x, dtype=float)
    shape = x.shape
    xf = x.reshape(-1)
    gx = np.asarray(value(xf), dtype=float)
    if np.any(gx < 0):
        raise ValueError("numeric prox requires a nonnegative potential")
    half = np.sqrt(2.0 * t * gx) + 1e-12
    n = _grid_size(float(half.max()) if half.size else 0.0, t, n_grid, scale)
    u = np.linspace(-1.0, 1.0, n)
    step = max(1, chunk // n)
    out = np.empty_like(xf)
    for a in range(0, xf.size, step):
        sl = slice(a, a + step)
        out[sl] = _prox_scalar_block(value, xf[sl], half[sl], u, t, tol, grad, n_candidates)
    return out.reshape(shape)


def _prox_scalar_block(value, xf, half, u, t, tol, grad, n_candidates):
    m = xf.size
    ys = xf[:, None] + half[:, None] * u[None, :]
    obj = value(ys) + (ys - xf[:, None]) ** 2 / (2.0 * t)
    # local minima of the grid objective (ends count when lower than their neighbour)
    left = np.concatenate([np.full((m, 1), np.inf), obj[:, :-1]], axis=1)
    right = np.concatenate([obj[:, 1:], np.full((m, 1), np.inf)], axis=1)
    cand = np.where((obj <= left) & (obj <= right), obj, np.inf)
    k = min(n_candidates, u.size)
    idx = np.argsort(cand, axis=1, kind="stable")[:, :k]
    h = half * (u[1] - u[0])
    rows = np.arange(m)

    def phi(y):
        return value(y) + (y - xf) ** 2 / (2.0 * t)

    best_p = ys[rows, idx[:, 0]]
    best_v = phi(best_p)
    for c in range(k):
        j = idx[:, c]
        valid = np.isfinite(cand[rows, j])
        centre = ys[rows, j]
        p = golden_section_min(phi, centre - h, centre + h, tol=tol)
        fp = phi(p)
        fc = phi(centre)
        p = np.where(fp <= fc, p, centre)
        fp = np.minimum(fp, fc)
        better = valid & (fp < best_v)
        best_p = np.where(better, p, best_p)
        best_v = np.where(better, fp, best_v)
    p = best_p
    if grad is not None:
        p = _polish_stationary(grad, xf, t, p, np.maximum(1e-6 * (1.0 + np.abs(p)), 4 * tol))
    return p


def _polish_stationary(grad, x, t, p, width):
    def dphi(y):
        return grad(y) + (y - x) / t

    lo = p - width
    hi = p + width
    dlo = dphi(lo)
    dhi = dphi(hi)
    ok = (dlo < 0) & (dhi > 0)
    if not np.any(ok):
        return p
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        dm = dphi(mid)
        right = dm > 0
        hi = np.where(right, mid, hi)
        lo = np.where(right, lo, mid)
    return np.where(ok, 0.5 * (lo + hi), p)


# ---------------------------------------------------------------------------
# Compiled global prox for 1D Gaussian-mixture potentials
# ---------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True)
def _gmm_value(y, logc, mu, sd, shift):
    # single-pass log-sum-exp
    m = -np.inf
    s = 0.0
    for i in range(logc.size):
        z = (y - mu[i]) / sd[i]
        v = logc[i] - 0.5 * z * z
        if v > m:
            s = s * math.exp(m - v) + 1.0
            m = v
        else:
            s += math.exp(v - m)
    return shift - (m + math.log(s))


@numba.njit(cache=True, nogil=True)
def _gmm_grad(y, logc, mu, sd):
    m = -np.inf
    num = 0.0
    den = 0.0
    for i in range(logc.size):
        z = (y - mu[i]) / sd[i]
        v = logc[i] - 0.5 * z * z
        g = z / sd[i]
        if v > m:
            c = math.exp(m - v)
            den = den * c + 1.0
            num = num * c + g
            m = v
        else:
            r = math.exp(v - m)
            den += r
            num += r * g
    return num / den


@numba.njit(cache=True, nogil=True)
def _gmm_phi(y, x, t, logc, mu, sd, shift):
    return _gmm_value(y, logc, mu, sd, shift) + (y - x) ** 2 / (2.0 * t)


@numba.njit(cache=True, nogil=True)
def _gmm_golden(x, t, a, b, gtol, logc, mu, sd, shift):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _gmm_phi(c, x, t, logc, mu, sd, shift)
    fd = _gmm_phi(d, x, t, logc, mu, sd, shift)
    for _ in range(200):
        if b - a <= gtol:
            break
        if fc < fd:
            b = d
            d = c
            fd = fc
            c = b - invphi * (b - a)
            fc = _gmm_phi(c, x, t, logc, mu, sd, shift)
        else:
            a = c
            c = d
            fc = fd
            d = a + invphi * (b - a)
            fd = _gmm_phi(d, x, t, logc, mu, sd, shift)
    return 0.5 * (a + b)


@numba.njit(cache=True, nogil=True)
def _gmm_prox_kernel(xs, t, logc, mu, sd, shift, n_grid, spacing, n_cand, tol, out):
    for e in range(xs.size):
        x = xs[e]
        half = math.sqrt(2.0 * t * _gmm_value(x, logc, mu, sd, shift)) + 1e-12
        n = max(n_grid, int(math.ceil(2.0 * half / spacing)) + 1)
        du = 2.0 / (n - 1)
        obj = np.empty(n)
        for j in range(n):
            y = x + half * (-1.0 + j * du)
            obj[j] = _gmm_phi(y, x, t, logc, mu, sd, shift)
        # the n_cand lowest grid local minima, kept sorted by value
        cj = np.full(n_cand, -1)
        cv = np.full(n_cand, np.inf)
        for j in range(n):
            o = obj[j]
            if (j > 0 and obj[j - 1] < o) or (j < n - 1 and obj[j + 1] < o):
                continue
            if o < cv[n_cand - 1]:
                k = n_cand - 1
                while k > 0 and cv[k - 1] > o:
                    cv[k] = cv[k - 1]
                    cj[k] = cj[k - 1]
                    k -= 1
                cv[k] = o
                cj[k] = j
        h = half * du
        best = np.inf
        p = x
        for c in range(n_cand):
            # phi exceeds its cell minimum by at most curvature * h^2 / 2 <= 1/16 at a
            # grid point, so basins graded worse than the best by more cannot win
            if cj[c] < 0 or cv[c] > cv[0] + 0.1:
                break
            centre = x + half * (-1.0 + cj[c] * du)
            # coarse bracket only; the stationarity polish below resolves the rest
            gtol = max(tol, 1e-7 * (1.0 + abs(centre)))
            q = _gmm_golden(x, t, centre - h, centre + h, gtol, logc, mu, sd, shift)
            fq = _gmm_phi(q, x, t, logc, mu, sd, shift)
            if fq > cv[c]:
                q = centre
                fq = cv[c]
            if fq < best:
                best = fq
                p = q
        # polish on the stationarity condition
        w = max(1e-6 * (1.0 + abs(p)), 4.0 * tol)
        lo = p - w
        hi = p + w
        if (_gmm_grad(lo, logc, mu, sd) + (lo - x) / t < 0.0
                and _gmm_grad(hi, logc, mu, sd) + (hi - x) / t > 0.0):
            for _ in range(45):
                mid = 0.5 * (lo + hi)
                if _gmm_grad(mid, logc, mu, sd) + (mid - x) / t > 0.0:
                    hi = mid
                else:
                    lo = mid
            p = 0.5 * (lo + hi)
        out[e] = p


def prox_gaussian_mixture(x, t, logc, means, sigmas, shift, n_grid=129, tol=1e-10,
                          n_candidates=3):
    """Global prox of ``shift - log sum_i exp(logc_i - (y - m_i)^2 / (2 s_i^2))``.

    Same search as :func:`prox_scalar_numeric` with ``scale = min(sigmas)``, compiled.
    """
    _check_positive(t=t)
    x = np.asarray(x, dtype=float)
    xs = np.ascontiguousarray(x.reshape(-1))
    out = np.empty_like(xs)
    sd = np.asarray(sigmas, dtype=float)
    spacing = 0.25 * min(math.sqrt(t), float(sd.min()))
    _gmm_prox_kernel(xs, float(t), np.asarray(logc, dtype=float), np.asarray(means, dtype=float),
                     sd, float(shift), int(n_grid), spacing, int(n_candidates), float(tol), out)
    return out.reshape(x.shape)
