"""Distances between 1D distributions and sampler diagnostics.

TV distances use the unnormalised convention ``int |p - q| dx`` (range [0, 2]),
i.e. twice the supremum-over-events definition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numba
import numpy as np

from .reference import GridDensity


@dataclass
class Histogram:
    edges: np.ndarray
    densities: np.ndarray

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=float)
        self.densities = np.asarray(self.densities, dtype=float)
        if self.edges.size != self.densities.size + 1 or np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be increasing with one more entry than densities")
        if np.any(self.densities < 0):
            raise ValueError("densities must be nonnegative")

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def mass(self):
        return float(np.sum(self.densities * np.diff(self.edges)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.edges, x, side="right") - 1
        inside = (idx >= 0) & (idx < self.densities.size)
        # the last bin is closed on the right
        last = x == self.edges[-1]
        idx = np.where(last, self.densities.size - 1, idx)
        inside |= last
        return np.where(inside, self.densities[np.clip(idx, 0, self.densities.size - 1)], 0.0)


@dataclass
class TvTrace:
    iterations: list
    tv_values: list

    def __post_init__(self):
        if len(self.iterations) != len(self.tv_values):
            raise ValueError("iterations and values must have equal length")


MAX_BINS = 100_000


def _auto_bin_count(n, lo, hi, q25, q75):
    # numpy's "auto" rule: the narrower of Freedman-Diaconis and Sturges
    fd = 2.0 * (q75 - q25) * n ** (-1.0 / 3.0)
    sturges = (hi - lo) / (np.log2(n) + 1.0)
    width = np.where(fd > 0, np.minimum(fd, sturges), sturges)
    return np.minimum(np.ceil((hi - lo) / width), MAX_BINS).astype(np.int64)


def histogram_auto(samples):
    """Density histogram with numpy's ``bins="auto"`` rule (at most MAX_BINS bins)."""
    s = np.asarray(samples, dtype=float).reshape(-1)
    s = s[np.isfinite(s)]
    if s.size < 2 or np.all(s == s[0]):
        raise ValueError("need at least two distinct samples")
    lo, hi = float(s.min()), float(s.max())
    q75, q25 = np.percentile(s, [75, 25])
    nb = int(_auto_bin_count(s.size, lo, hi, q25, q75))
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        dens, edges = np.histogram(s, bins=nb, range=(lo, hi), density=True)
    if not np.all(np.isfinite(dens)) or np.any(np.diff(edges) <= 0):
        raise ValueError("samples are too concentrated to bin")
    h = Histogram(edges, dens)
    m = h.mass()
    if not (np.isfinite(m) and m > 0):
        raise ValueError("samples are too concentrated to bin")
    h.densities = h.densities / m
    return h


@numba.njit(cache=True)
def _count_uniform(a, first, last, nb, edges, out):
    # bin assignment identical to numpy's equal-width fast path
    denom = last - first
    for i in range(a.size):
        v = a[i]
        if v < first or v > last:
            continue
        k = int((v - first) / denom * nb)
        if k == nb:
            k -= 1
        if v < edges[k]:
            k -= 1
        if v >= edges[k + 1] and k != nb - 1:
            k += 1
        out[k] += 1


def histograms_auto_columns(samples):
    """:func:`histogram_auto` applied to every column of ``samples`` (n, m).

    Reproduces ``np.histogram(bins="auto", density=True)`` per column, with the
    quantiles computed in one vectorised call.
    """
    a = np.asarray(samples, dtype=float)
    if a.ndim != 2:
        raise ValueError("samples must be a 2D array (n_samples, n_columns)")
    if not np.all(np.isfinite(a)):
        return [histogram_auto(a[:, j]) for j in range(a.shape[1])]
    n = a.shape[0]
    lo = a.min(axis=0)
    hi = a.max(axis=0)
    if n < 2 or np.any(lo == hi):
        raise ValueError("need at least two distinct samples in every column")
    q75, q25 = np.percentile(a, [75, 25], axis=0)
    counts_nb = _auto_bin_count(n, lo, hi, q25, q75)
    out = []
    for j in range(a.shape[1]):
        nb = int(counts_nb[j])
        edges = np.linspace(lo[j], hi[j], nb + 1)
        counts = np.zeros(nb, dtype=np.int64)
        _count_uniform(np.ascontiguousarray(a[:, j]), lo[j], hi[j], nb, edges, counts)
        dens = counts / np.diff(edges) / counts.sum()
        h = Histogram(edges, dens)
        h.densities = h.densities / h.mass()
        out.append(h)
    return out


@numba.njit(cache=True)
def _tv_hist_grid(edges, dens, gx, gv):
    pts = np.sort(np.concatenate((edges, gx)))
    nb = dens.size
    ng = gx.size
    kh = 0
    kg = 0
    total = 0.0
    for i in range(pts.size - 1):
        a = pts[i]
        b = pts[i + 1]
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        hv = 0.0
        if edges[0] <= mid <= edges[nb]:
            while kh < nb - 1 and edges[kh + 1] <= mid:
                kh += 1
            hv = dens[kh]
        pa = 0.0
        pb = 0.0
        if gx[0] <= mid <= gx[ng - 1]:
            while kg < ng - 2 and gx[kg + 1] <= mid:
                kg += 1
            slope = (gv[kg + 1] - gv[kg]) / (gx[kg + 1] - gx[kg])
            pa = gv[kg] if a == gx[kg] else slope * (a - gx[kg]) + gv[kg]
            pb = gv[kg + 1] if b == gx[kg + 1] else slope * (b - gx[kg]) + gv[kg]
        fa = hv - pa
        fb = hv - pb
        if fa * fb >= 0:
            total += 0.5 * (abs(fa) + abs(fb)) * (b - a)
        else:
            total += (fa * fa + fb * fb) / (2.0 * (abs(fa) + abs(fb))) * (b - a)
    return total


def tv_columns(samples, refs, degenerate="raise"):
    """TV between the auto-binned histogram of each column and its reference.

    ``refs`` is one GridDensity shared by all columns or one per column. With
    ``degenerate="singular"`` a column of identical samples is a point mass,
    which is at TV distance 2 from any density.
    """
    a = np.asarray(samples, dtype=float)
    if a.ndim != 2:
        raise ValueError("samples must be a 2D array (n_samples, n_columns)")
    if isinstance(refs, GridDensity):
        refs = [refs] * a.shape[1]
    if len(refs) != a.shape[1]:
        raise ValueError("need one reference per column")
    out = np.empty(a.shape[1])
    if degenerate == "singular":
        flat = np.all(a == a[:1], axis=0)
        if np.any(flat):
            out[flat] = 2.0
            keep = np.flatnonzero(~flat)
            if keep.size:
                out[keep] = tv_columns(a[:, keep], [refs[j] for j in keep])
            return out
    elif degenerate != "raise":
        raise ValueError(f"unknown degenerate policy {degenerate!r}")
    hists = histograms_auto_columns(a)
    for j, (h, r) in enumerate(zip(hists, refs)):
        if h.edges[-1] <= r.lo or r.hi <= h.edges[0]:
            out[j] = 2.0
        else:
            out[j] = _tv_hist_grid(h.edges, h.densities, r.x, r.values)
    return out


def _pieces(obj):
    """Breakpoints plus an evaluator returning (left value, right value) on each piece."""
    if isinstance(obj, Histogram):
        return obj.edges, (obj.edges[0], obj.edges[-1])
    if isinstance(obj, GridDensity):
        return obj.x, (obj.lo, obj.hi)
    raise TypeError(f"unsupported distribution type {type(obj).__name__}")


def _endpoint_values(obj, a, b):
    mid = 0.5 * (a + b)
    if isinstance(obj, Histogram):
        v = obj(mid)
        return v, v
    inside = (mid >= obj.lo) & (mid <= obj.hi)
    va = np.where(inside, np.interp(a, obj.x, obj.values), 0.0)
    vb = np.where(inside, np.interp(b, obj.x, obj.values), 0.0)
    return va, vb


def _abs_linear_integral(fa, fb, width):
    # int_0^1 |fa + (fb - fa) u| du * width, written to avoid overflow
    same = np.sign(fa) * np.sign(fb) >= 0
    s = np.abs(fa) + np.abs(fb)
    ra = np.divide(np.abs(fa), s, out=np.zeros_like(s), where=s > 0)
    cross = 0.5 * s * (ra * ra + (1.0 - ra) ** 2)
    return np.where(same, 0.5 * s, cross) * width


def tv_distance(p, q):
    """``int |p - q| dx`` exactly for piecewise-linear / piecewise-constant inputs."""
    bp, (plo, phi) = _pieces(p)
    bq, (qlo, qhi) = _pieces(q)
    if phi <= qlo or qhi <= plo:
        return 2.0
    pts = np.union1d(bp, bq)
    a, b = pts[:-1], pts[1:]
    pa, pb = _endpoint_values(p, a, b)
    qa, qb = _endpoint_values(q, a, b)
    return float(np.sum(_abs_linear_integral(pa - qa, pb - qb, b - a)))


def _check_normalised(g, tol=1e-6):
    m = g.mass() if hasattr(g, "mass") else None
    if m is None or abs(m - 1.0) > tol:
        raise ValueError(f"density is not normalised (mass={m})")


def wasserstein1_1d(p, q, refine=1):
    """``int |CDF_p - CDF_q| dx`` on the merged grid."""
    for g in (p, q):
        _check_normalised(g)
    pts = np.union1d(_pieces(p)[0], _pieces(q)[0])
    if refine > 1:
        pts = np.union1d(pts, np.linspace(pts[0], pts[-1], refine * pts.size))
    dx = np.diff(pts)

    def cdf(g):
        if isinstance(g, Histogram):
            # exact CDF of a piecewise-constant density at the merged points
            c = np.concatenate([[0.0], np.cumsum(g.densities * np.diff(g.edges))])
            return np.interp(pts, g.edges, c, left=0.0, right=1.0)
        v = g(pts)
        return np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dx)])

    diff = cdf(p) - cdf(q)
    return float(np.sum(_abs_linear_integral(diff[:-1], diff[1:], dx)))


def finite_difference_marginals(states):
    """Per-chain differences ``x[i+1] - x[i]`` as ``d - 1`` sample vectors."""
    s = np.asarray(states, dtype=float)
    if s.ndim != 2 or s.shape[1] < 2:
        raise ValueError("states must be (n_chains, d) with d >= 2")
    return list(np.diff(s, axis=1).T)


def select_percentile_marginals(tv_by_site, window, percentiles=(0.0, 50.0, 100.0)):
    """Sites at the given percentiles of the window-averaged final TV error.

    Ties resolve to the lowest site index.
    """
    tv = np.asarray(tv_by_site, dtype=float)
    if tv.size == 0 or tv.ndim != 2:
        raise ValueError("tv_by_site must be a non-empty (sites, iterations) matrix")
    if not 1 <= window <= tv.shape[1]:
        raise ValueError("window must lie in [1, n_iterations]")
    means = tv[:, -window:].mean(axis=1)
    order = np.sort(means)
    n = means.size
    out = []
    for q in percentiles:
        rank = int(round(q / 100.0 * (n - 1)))
        out.append(int(np.flatnonzero(means == order[rank])[0]))
    return tuple(out)


def potential_trace(snapshots, potential, chain=0):
    """``U(X_k)`` per recorded iteration for one chain, or the ensemble mean if ``chain='mean'``."""
    if not snapshots:
        raise ValueError("no snapshots recorded")
    its, vals = [], []
    for it, payload in snapshots:
        if isinstance(payload, dict):
            vals.append(payload["U_mean"] if chain == "mean" else payload["U_first"])
        else:
            u = potential.energy(payload)
            vals.append(float(np.mean(u)) if chain == "mean" else float(u[chain]))
        its.append(int(it))
    return TvTrace(its, vals)


def write_traces_csv(path, iterations, columns):
    """Write ``Iterations`` plus one column per named series."""
    names = list(columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Iterations"] + names)
        for i, it in enumerate(iterations):
            w.writerow([int(it)] + [_fmt(columns[n][i]) for n in names])


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "nan"
    return repr(float(v))
