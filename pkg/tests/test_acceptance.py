"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so a failing criterion still reports its measured values.
"""
import filecmp
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from daz import experiments as E
from daz import metrics as M
from daz import potentials as PT
from daz import reference as R
from daz import samplers as S

LAPLACE_T = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0]
LAPLACE_GRID = [-10.0, 10.0, 200001]
DETERMINISM = ("laplace-moreau", "gmm", "tv-prior", "tv-chain")


def _config(name, **kw):
    cfg = E.load_config(E.resolve_config(name))
    d = cfg.to_dict()
    d.update(kw)
    return E.ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Single-thread runs of the default experiments, written once and shared."""
    cache = {}

    def get(name):
        if name not in cache:
            out = tmp_path_factory.mktemp(f"{name}-1")
            t0 = time.perf_counter()
            res = E.run_experiment(_config(name), n_threads=1, out_dir=str(out))
            cache[name] = (res, time.perf_counter() - t0, out)
        return cache[name]

    return get


def _check(criterion, checks, extra=""):
    failed = [name for name, ok in checks if not ok]
    detail = "all checks hold" if not failed else "failed: " + ", ".join(failed)
    record_acceptance(criterion, not failed, f"{detail}{'; ' + extra if extra else ''}")
    assert not failed, detail + "; " + extra


def test_criterion_1_laplace_moreau_curve():
    t0 = time.perf_counter()
    cfg = E.ExperimentConfig.from_dict(dict(experiment="moreau-sweep", function="abs",
                                            t_grid=LAPLACE_T, grid=LAPLACE_GRID,
                                            boundary_tol=1e-4))
    curve = E.run_experiment(cfg, write=False).data["tv_curve"]
    elapsed = time.perf_counter() - t0
    tv = np.array([curve[t][0] for t in LAPLACE_T])
    ratio = tv / np.array(LAPLACE_T)
    spread = ratio.max() / ratio.min()
    _check(1, [("TV strictly increasing in t", bool(np.all(np.diff(tv) > 0))),
               ("TV/t within a factor 3", spread <= 3.0),
               ("runtime < 10 s", elapsed < 10.0)],
           f"TV/t spread {spread:.3g}, runtime {elapsed:.1f} s")


def test_criterion_2_laplace_myula_stationarity(runs):
    res, elapsed, _ = runs("laplace-moreau")
    quad, emp = res.data["quadrature"], res.data["empirical"]
    taus = res.config.tau_grid
    fixed = sorted(float(t) for t in taus if t != "half-t")
    above = all(emp[(t, tau)] > quad[t] for t in quad for tau in taus)
    ordered = all(emp[(t, a)] < emp[(t, b)] for t in quad for a, b in zip(fixed, fixed[1:]))
    _check(2, [("empirical TV exceeds quadrature", above),
               ("TV grows with tau for every adjacent pair", ordered),
               ("runtime < 2 min", elapsed < 120.0)], f"runtime {elapsed:.0f} s")


def test_criterion_3_gmm(runs):
    res, elapsed, _ = runs("gmm")
    checks, notes = [], []
    for init, d in res.data.items():
        tr, gt, axis = d["traces"], d["gt"], d["axis"]
        floor = float(np.mean(gt))
        at = tr["DAZ"][np.searchsorted(axis, 1000)]
        checks.append((f"{init}: DAZ at 1000 within 1.5x GT", at <= 1.5 * floor))
        for other in ("ALD", "ULA", "MYULA"):
            checks.append((f"{init}: DAZ <= {other}", tr["DAZ"][-1] <= tr[other][-1]))
        checks.append((f"{init}: GT floor in 0.4 +-50%", 0.2 <= floor <= 0.6))
        notes.append(f"{init}: GT {floor:.3f} DAZ {at:.3f}")
    checks.append(("runtime < 5 min", elapsed < 300.0))
    _check(3, checks, ", ".join(notes) + f", runtime {elapsed:.0f} s")


def _neglog_error(samples, half=2.0):
    h = M.histogram_auto(samples)
    c, v = h.centers, h.densities
    keep = (np.abs(c) <= half) & (v > 0)
    return float(np.max(np.abs(-np.log(v[keep]) - math.log(2.0) - np.abs(c[keep]))))


def test_criterion_4_tv_prior(runs):
    res, elapsed, _ = runs("tv-prior")
    data = res.data
    final = {k: data[k]["tv"][-1, data[k]["selected"]] for k in ("DAZ", "ULA", "MYULA")}
    daz = data["DAZ"]
    shape = max(_neglog_error(daz["final_diffs"][:, s]) for s in daz["selected"])
    _check(4, [("DAZ below ULA at each percentile", bool(np.all(final["DAZ"] < final["ULA"]))),
               ("DAZ below MYULA at each percentile",
                bool(np.all(final["DAZ"] < final["MYULA"]))),
               ("-log marginal within 0.5 of |x| on [-2, 2]", shape <= 0.5),
               ("runtime < 10 min", elapsed < 600.0)],
           f"DAZ {np.round(final['DAZ'], 3).tolist()}, ULA {np.round(final['ULA'], 3).tolist()}, "
           f"shape error {shape:.3f}, runtime {elapsed:.0f} s")


def _denoising_checks(data, limit=0.15):
    daz, ula = data["DAZ"], data["ULA"]
    site = daz["selected"][1]
    axis = daz["axis"]
    late = axis > 0.5 * axis[-1]
    final = float(daz["tv"][-1, site])
    dominated = bool(np.all(daz["tv"][late, site] <= ula["tv"][late, site]))
    return final, [(f"DAZ median-site final TV <= {limit}", final <= limit),
                   ("DAZ <= ULA past 50% of the run", dominated)]


def test_criterion_5_tv_chain(runs):
    res, elapsed, _ = runs("tv-chain")
    final, checks = _denoising_checks(res.data)
    checks.append(("runtime < 10 min", elapsed < 600.0))
    _check(5, checks, f"DAZ final TV {final:.3f} with {res.config.n_labels} labels, "
                      f"runtime {elapsed:.0f} s")


def test_criterion_6_oracle_suite():
    import test_potentials
    import test_prox
    import test_reference
    import test_samplers

    suite = [("1D TV prox = QP oracle", test_prox.test_tv1d_matches_qp_oracle),
             ("chain BP = enumeration", test_reference.test_chain_bp_matches_enumeration),
             ("APGD lasso = soft threshold", test_prox.test_apgd_lasso_matches_soft_threshold)]
    for t in (0.05, 0.3, 2.0):
        suite.append((f"Moreau gradient = FD (TV, t={t})", lambda t=t: test_potentials.
                      test_moreau_gradient_matches_finite_differences_tv_chain(t)))
    for t in (1e-3, 0.1, 1.0):
        suite.append((f"Moreau gradient = FD (GMM, t={t})", lambda t=t: test_potentials.
                      test_moreau_gradient_matches_finite_differences_gmm(t)))
    for name in ("abs", "gmm4", "quadratic"):
        suite.append((f"Hamilton-Jacobi residual ({name})",
                      lambda n=name: test_potentials.test_hamilton_jacobi_residual(n)))
    for t in (1e-3, 1e-2, 0.1, 1.0):
        suite.append((f"NC(M^t) <= NC(G) (t={t})",
                      lambda t=t: test_potentials.test_moreau_envelope_reduces_nonconvexity(t)))
    for kind in S.KINDS:
        suite.append((f"Gaussian variance ({kind})",
                      lambda k=kind: test_samplers.test_gaussian_stationary_variance(k)))
    t0 = time.perf_counter()
    checks = []
    for name, fn in suite:
        try:
            fn()
            checks.append((name, True))
        except AssertionError:
            checks.append((name, False))
    elapsed = time.perf_counter() - t0
    checks.append(("runtime < 3 min", elapsed < 180.0))
    _check(6, checks, f"{len(suite)} oracle checks, runtime {elapsed:.0f} s")


def test_criterion_7_zero_temperature_limits():
    t0 = time.perf_counter()
    t = 0.5
    temps = (1e-1, 1e-2, 1e-3)
    x = np.linspace(-3, 3, 601)
    m = R.moreau_envelope_1d(PT.ABS, t, x)
    dm = np.clip(x / t, -1.0, 1.0)
    grid = (-10.0, 10.0, 4001)
    md = R.moreau_density_1d(PT.ABS, t, grid, boundary_tol=1e-4)
    val, grad, tv = [], [], []
    for T in temps:
        val.append(np.max(np.abs(PT.diffusion_potential_1d("abs", t, T, x) - m)))
        grad.append(np.max(np.abs(PT.diffusion_score_1d("abs", t, T, x) - dm)))
        tv.append(M.tv_distance(R.diffusion_density_1d("abs", t, T, grid, boundary_tol=1e-4), md))
    elapsed = time.perf_counter() - t0

    def decreasing(v):
        return bool(np.all(np.diff(v) < 0))

    _check(7, [("|G^t_T - M^t| decreases", decreasing(val)),
               ("|grad G^t_T - grad M^t| decreases", decreasing(grad)),
               ("TV(pi^t_T, pi^t) decreases", decreasing(tv)),
               ("runtime < 30 s", elapsed < 30.0)],
           f"TV {', '.join(f'{v:.2e}' for v in tv)}, runtime {elapsed:.1f} s")


def _files(root):
    return sorted(p.relative_to(root) for p in Path(root).rglob("*") if p.is_file())


def test_criterion_8_determinism_across_threads(runs, tmp_path):
    checks = []
    for name in DETERMINISM:
        _, _, out1 = runs(name)
        out8 = tmp_path / name
        E.run_experiment(_config(name), n_threads=8, out_dir=str(out8))
        f1, f8 = _files(out1), _files(out8)
        same = f1 == f8 and all(filecmp.cmp(out1 / f, out8 / f, shallow=False) for f in f1)
        checks.append((f"{name} byte-identical", same))
    _check(8, checks, "1 vs 8 threads")


@pytest.mark.skipif(not os.environ.get("DAZ_ACCEPTANCE_IMAGE"),
                    reason="image check is opt-in (set DAZ_ACCEPTANCE_IMAGE=1)")
def test_image_denoising_against_loopy_bp():
    res = E.run_experiment(_config("tv-image", samplers=["ULA", "DAZ"]), write=False)
    final, checks = _denoising_checks(res.data)
    _check("image", checks, f"DAZ final TV {final:.3f} (loopy BP reference, approximate)")
