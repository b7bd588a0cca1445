"""Config-driven experiments that write CSV reports.

Every experiment shares one base seed across samplers (common random numbers),
and all floating point output goes through ``repr`` so files are
byte-reproducible for a fixed configuration.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from . import metrics as M
from . import potentials as PT
from . import reference as R
from . import samplers as S

log = logging.getLogger(__name__)

EXPERIMENTS = {
    "moreau-sweep": "Moreau envelopes, envelope densities and TV(pi^t, pi) for a 1D potential",
    "laplace-moreau": "Stationary MYULA error on the Laplace target over a (t, tau) grid",
    "gmm": "1D Gaussian mixture: TV traces of all samplers plus the direct-sample floor",
    "tv-prior": "TV prior in d=10: finite-difference marginals against the Laplace law",
    "tv-chain": "TV-L2 denoising on a chain: site marginals against exact chain BP",
    "tv-image": "TV-L2 denoising on an image: pixel marginals against loopy grid BP",
}

SAMPLER_ORDER = ("ULA", "MYULA", "SKROCK", "ALD", "DAZ", "DAZ_SKROCK")
FULL_MEMORY_LIMIT = 2 * 1024**3

_DEFAULTS = {
    "moreau-sweep": dict(function="abs", t_grid=[0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0],
                         samplers=[]),
    "laplace-moreau": dict(function="abs", t_grid=[0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0],
                           tau_grid=[0.001, 0.1, 0.5, "half-t"], n_chains=10000, n_iters=2000,
                           samplers=["MYULA"], boundary_tol=1e-4, grid=[-10.0, 10.0, 200001]),
    "gmm": dict(t_small=1e-4, t_large=1e-2, N=50, K=20, n_chains=1000,
                inits=["gaussian", "dirac"], init_var=1.0),
    "tv-prior": dict(dim=10, lam=1.0, t_small=2e-4, t_large=1e-1, N=1000, K=1, n_chains=10000,
                     inits=["gaussian"], init_var=0.1, projection=True, window=50,
                     percentiles=[0.0, 50.0, 100.0], boundary_tol=1e-4),
    "tv-chain": dict(sigma=0.1, lam=30.0, t_small=1e-4, t_large=1e-3, N=50, K=20, n_chains=1000,
                     inits=["dirac"], window=20, percentiles=[5.0, 50.0, 95.0]),
    "tv-image": dict(sigma=0.05, lam=30.0, t_small=1e-5, t_large=1e-3, N=50, K=20, n_chains=100,
                     inits=["data"], image_size=64, window=20, percentiles=[5.0, 50.0, 95.0],
                     trace_stride=10, site_stride=4, n_labels=201, prox_tolerance=1e-4),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    samplers: list = field(default_factory=lambda: list(SAMPLER_ORDER))
    n_chains: int = 1000
    base_seed: int = 0
    t_small: Optional[float] = None
    t_large: Optional[float] = None
    N: Optional[int] = None
    K: Optional[int] = None
    step_policy: str = "half-t"
    sigma: Optional[float] = None
    lam: Optional[float] = None
    data_source: str = "synthetic"
    data_seed: int = 0
    output_dir: str = "results"
    recorder: str = "summary"
    inits: list = field(default_factory=lambda: ["gaussian"])
    init_var: float = 1.0
    function: Optional[str] = None
    t_grid: list = field(default_factory=list)
    tau_grid: list = field(default_factory=list)
    n_iters: Optional[int] = None
    dim: Optional[int] = None
    image_size: Optional[int] = None
    n_labels: int = 501
    label_margin: float = 1.0
    window: int = 20
    percentiles: list = field(default_factory=lambda: [5.0, 50.0, 95.0])
    grid: list = field(default_factory=lambda: [-10.0, 10.0, 4001])
    curve_grid: list = field(default_factory=lambda: [-5.0, 5.0, 1001])
    boundary_tol: float = 1e-10
    projection: bool = False
    trace_stride: int = 1
    site_stride: int = 1
    bp_damping: float = 0.5
    bp_max_sweeps: int = 500
    bp_tol: float = 1e-6
    prox_tolerance: float = 1e-6
    skrock_eta: float = 0.05
    skrock_stages: int = 5
    skrock_step_factor: float = 0.9
    full_scale: bool = False

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        exp = d.get("experiment")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {exp!r}; known: {sorted(EXPERIMENTS)}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged = dict(_DEFAULTS[exp])
        merged.update(d)
        cfg = cls(**merged)
        if cfg.full_scale:
            cfg.apply_full_scale()
        return cfg

    def apply_full_scale(self):
        self.full_scale = True
        if self.experiment == "tv-prior":
            self.n_chains = max(self.n_chains, 100000)
        if self.experiment == "tv-image":
            self.image_size = 200
            self.n_chains = max(self.n_chains, 1000)
            self.n_labels = max(self.n_labels, 501)
            self.trace_stride = 1
            self.site_stride = 1
        return self

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def schedule(self, lip_grad_F=None):
        return S.make_loglinear_schedule(self.t_small, self.t_large, int(self.N), int(self.K),
                                         self.step_policy, lip_grad_F)


def load_config(path):
    import yaml

    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return ExperimentConfig.from_dict(raw)


def builtin_config_dir():
    return Path(__file__).resolve().parent / "configs"


def resolve_config(name_or_path):
    """A path to a YAML file, or the stem of a bundled config."""
    p = Path(name_or_path)
    if p.exists():
        return p
    cand = builtin_config_dir() / f"{name_or_path}.yaml"
    if cand.exists():
        return cand
    raise ConfigError(f"config {name_or_path!r} not found")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    message: str

    def __str__(self):
        return f"{self.level}: {self.message}"


def _lip_metadata(cfg):
    if cfg.experiment in ("tv-chain", "tv-image") and cfg.sigma:
        return 1.0 / cfg.sigma**2
    return 0.0


def _iterations(cfg):
    if cfg.experiment == "laplace-moreau":
        return int(cfg.n_iters or 0)
    if cfg.N and cfg.K:
        return int(cfg.N) * int(cfg.K)
    return 0


def validate_config(cfg):
    """Diagnostics for a config without running it."""
    out = []

    def err(msg):
        out.append(Diagnostic("error", msg))

    def warn(msg):
        out.append(Diagnostic("warning", msg))

    if cfg.experiment not in EXPERIMENTS:
        err(f"unknown experiment {cfg.experiment!r}")
        return out
    for s in cfg.samplers:
        if s not in S.KINDS:
            err(f"unknown sampler {s!r}; choose from {list(S.KINDS)}")
    if cfg.n_chains < 1:
        err("n_chains must be positive")
    if cfg.recorder not in ("full", "strided", "summary", "none"):
        err(f"unknown recorder policy {cfg.recorder!r}")
    if cfg.step_policy not in S.STEP_POLICIES:
        err(f"unknown step policy {cfg.step_policy!r}")

    sampled = cfg.experiment in ("gmm", "tv-prior", "tv-chain", "tv-image")
    if sampled:
        for key in ("t_small", "t_large", "N", "K"):
            if getattr(cfg, key) is None:
                err(f"{cfg.experiment} needs {key}")
        if not any(d.level == "error" for d in out):
            if not (cfg.t_small > 0 and cfg.t_large > 0):
                err("schedule endpoints must be positive")
            elif cfg.t_small >= cfg.t_large:
                err("schedule endpoints inverted")
            if cfg.N < 2:
                err("N must be at least 2")
            if cfg.K < 1:
                err("K must be at least 1")
        if not any(d.level == "error" for d in out):
            lip = _lip_metadata(cfg)
            sch = cfg.schedule(lip)
            if cfg.step_policy == "half-t" and np.any(sch.tau_values > sch.t_values):
                err("step sizes violate tau_n <= t_n")
            if any(s in ("SKROCK", "DAZ_SKROCK") for s in cfg.samplers):
                if cfg.skrock_stages < 2:
                    err("SK-ROCK needs at least 2 stages")
                if lip is None:
                    err("SK-ROCK needs lip_grad_F metadata")
        if not cfg.samplers:
            err("no samplers selected")
        if not 1 <= cfg.window <= max(1, _iterations(cfg)):
            err("window must lie in [1, number of iterations]")
        for init in cfg.inits:
            if init not in ("gaussian", "dirac", "data"):
                err(f"unknown init {init!r}")
    if cfg.experiment in ("moreau-sweep", "laplace-moreau"):
        if cfg.function not in PT.SCALAR_FUNCTIONS:
            err(f"unknown scalar function {cfg.function!r}")
        if not cfg.t_grid or any(float(t) <= 0 for t in cfg.t_grid):
            err("t_grid must be a non-empty list of positive values")
    if cfg.experiment == "laplace-moreau":
        if not cfg.tau_grid:
            err("tau_grid must be non-empty")
        for tau in cfg.tau_grid:
            if tau != "half-t" and not (isinstance(tau, (int, float)) and tau > 0):
                err(f"invalid step size {tau!r} in tau_grid")
        if not cfg.n_iters or cfg.n_iters < 1:
            err("n_iters must be positive")
    if cfg.experiment in ("tv-chain", "tv-image"):
        if not (cfg.sigma and cfg.sigma > 0 and cfg.lam and cfg.lam > 0):
            err("sigma and lam must be positive")
        elif cfg.label_margin < 6 * cfg.sigma:
            warn(f"BP label range margin {cfg.label_margin} is below 6 sigma = {6 * cfg.sigma:g}; "
                 "the labels may not cover the data range")
        if cfg.n_labels < 2:
            err("n_labels must be at least 2")
    if cfg.experiment == "tv-image":
        if cfg.data_source != "synthetic" and not os.path.exists(cfg.data_source):
            err(f"image file {cfg.data_source!r} not found")
        if cfg.recorder == "full" and not any(d.level == "error" for d in out):
            d = (cfg.image_size or 0) ** 2
            need = cfg.n_chains * (_iterations(cfg) + 1) * d * 8
            if need > FULL_MEMORY_LIMIT:
                warn(f"recorder 'full' would keep about {need / 1024**3:.1f} GiB of states "
                     "per sampler; use recorder 'summary'")
    if cfg.experiment == "tv-prior" and (cfg.dim or 0) < 2:
        err("tv-prior needs dim >= 2")
    return out


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

CHAIN_PLATEAUS = ((0, 10, -3.0), (10, 30, -1.0), (30, 35, 3.0), (35, 75, 2.0))


def chain_ground_truth(d=100):
    y = np.zeros(d)
    for a, b, v in CHAIN_PLATEAUS:
        y[a:b] = v
    return y


def generate_chain_data(seed, sigma=0.1, d=100):
    """Piecewise-constant signal plus ``sigma`` times standard normal noise."""
    z = np.random.default_rng(seed).standard_normal(d)
    return chain_ground_truth(d) + sigma * z


def synthetic_image(size=64):
    """Piecewise-constant test image with values in [0, 1]."""
    img = np.full((size, size), 0.2)
    a, b = size // 4, 3 * size // 4
    img[a:b, a:b] = 0.8
    img[size // 8:size // 2, 5 * size // 8:7 * size // 8] = 0.5
    yy, xx = np.mgrid[:size, :size]
    disk = (yy - 0.7 * size) ** 2 + (xx - 0.3 * size) ** 2 <= (0.12 * size) ** 2
    img[disk] = 0.0
    return img


def read_pgm(path):
    """Read a binary (P5) or ASCII (P2) portable graymap, scaled to [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P5":
        pos += 1
        dtype = np.uint8 if maxval < 256 else ">u2"
        arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    elif magic == "P2":
        arr = np.array(data[pos:].split()[: w * h], dtype=float)
    else:
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    if arr.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {arr.size}")
    return arr.reshape(h, w).astype(float) / maxval


def image_data(cfg):
    if cfg.data_source == "synthetic":
        clean = synthetic_image(cfg.image_size)
    else:
        clean = read_pgm(cfg.data_source)
        n = cfg.image_size
        if n and clean.shape[0] >= n and clean.shape[1] >= n:
            clean = clean[:n, :n]
    z = np.random.default_rng(cfg.data_seed).standard_normal(clean.shape)
    return clean, clean + cfg.sigma * z


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


@dataclass
class CsvReport:
    filename: str
    header: list
    rows: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if len(r) != len(self.header):
                raise ValueError(f"{self.filename}: row of length {len(r)} for "
                                 f"{len(self.header)} columns")

    def text(self):
        lines = [",".join(self.header)]
        lines += [",".join(_fmt(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, config):
        path = Path(out_dir) / self.filename
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.text())
        meta = {"file": self.filename, "version": __version__, "seed": config.base_seed,
                "config": config.to_dict()}
        meta.update(self.metadata)
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list
    data: dict

    def write(self, out_dir=None):
        out = out_dir or self.config.output_dir
        return [r.write(out, self.config) for r in self.reports]


def config_from_sidecar(path):
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh)["config"])


# ---------------------------------------------------------------------------
# Sampler plumbing
# ---------------------------------------------------------------------------


def _spec(cfg, kind, schedule):
    kw = dict(skrock_eta=cfg.skrock_eta, skrock_stages=cfg.skrock_stages,
              skrock_step_factor=cfg.skrock_step_factor)
    if kind == "DAZ_SKROCK":
        schedule = S.skrock_budget_schedule(schedule, cfg.skrock_stages)
    return S.SamplerSpec(kind, schedule, **kw)


def _init_spec(kind, cfg, data=None):
    if kind == "gaussian":
        return S.InitSpec("gaussian", mean=0.0, var=cfg.init_var)
    if kind == "dirac":
        return S.InitSpec("dirac", x0=0.0)
    if kind == "data":
        return S.InitSpec("states", states=np.tile(np.asarray(data).reshape(1, -1),
                                                   (cfg.n_chains, 1)))
    raise ConfigError(f"unknown init {kind!r}")


def _observe(cfg, kind, potential, schedule, init, observer, n_threads, projection=None):
    """Run one sampler, calling ``observer(states)`` every ``trace_stride`` iterations.

    Returns ``(ensemble, iterations, values)`` with values upsampled piecewise
    constantly onto ``0, stride, 2*stride, ..., budget``.
    """
    stride = max(1, int(cfg.trace_stride))
    seen = []

    def obs(it, states):
        if it % stride == 0 or it == budget:
            seen.append((it, observer(states)))
        return None

    budget = schedule.total_steps
    rec = S.Recorder(policy="summary" if cfg.recorder == "summary" else cfg.recorder,
                     observer=obs, potential=potential)
    spec = _spec(cfg, kind, schedule)
    ens = S.run_ensemble(spec, potential, init, cfg.n_chains, cfg.base_seed, recorder=rec,
                         n_threads=n_threads, projection=projection, n_iters=budget)
    axis = np.arange(0, budget + 1, stride)
    if axis[-1] != budget:
        axis = np.append(axis, budget)
    its = np.array([it for it, _ in seen])
    idx = np.searchsorted(its, axis, side="right") - 1
    values = [seen[i][1] for i in idx]
    return ens, axis, values


def _potential_series(ens, axis, potential):
    if not ens.snapshot_log:
        return np.full(axis.size, np.nan)
    tr = M.potential_trace(ens.snapshot_log, potential, chain=0)
    its = np.array(tr.iterations)
    vals = np.array(tr.tv_values, dtype=float)
    idx = np.searchsorted(its, axis, side="right") - 1
    return vals[idx]


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _moreau_sweep(cfg, n_threads):
    fn = PT.scalar_function(cfg.function)
    ts = [float(t) for t in cfg.t_grid]
    lo, hi, n = cfg.curve_grid
    xc = np.linspace(lo, hi, int(n))
    env = {t: R.moreau_envelope_1d(fn, t, xc) for t in ts}
    cols = [f"M_t={t!r}" for t in ts]
    reports = [
        CsvReport("envelopes.csv", ["x", "G"] + cols,
                  [[xc[i], fn.value(xc[i:i + 1])[0]] + [env[t][i] for t in ts]
                   for i in range(xc.size)]),
        CsvReport("exp_neg_envelopes.csv", ["x", "exp(-G)"] + [f"exp(-M_t={t!r})" for t in ts],
                  [[xc[i], math.exp(-fn.value(xc[i:i + 1])[0])] + [math.exp(-env[t][i]) for t in ts]
                   for i in range(xc.size)]),
    ]
    grid = tuple(cfg.grid)
    base = R.density_1d(fn.value, grid, cfg.boundary_tol)
    rows = []
    curve = {}
    for t in ts:
        try:
            d = R.moreau_density_1d(fn, t, grid, cfg.boundary_tol)
        except R.BoundaryMassError as exc:
            log.warning("t=%g: %s", t, exc)
            rows.append([t, math.nan, math.nan, math.nan])
            continue
        tv = M.tv_distance(d, base)
        w1 = M.wasserstein1_1d(d, base)
        curve[t] = (tv, w1, d.log_partition)
        rows.append([t, tv, w1, d.log_partition])
    reports.append(CsvReport("tv_curve.csv", ["t", "tv", "w1", "log_Z"], rows))
    return reports, {"tv_curve": curve, "base": base}


def _laplace_samples(n, seed):
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0, 3])))
    return g.laplace(size=(n, 1))


def _laplace_moreau(cfg, n_threads):
    fn = PT.scalar_function(cfg.function)
    pot = PT.scalar_potential(fn, 1)
    grid = tuple(cfg.grid)
    base = R.density_1d(fn.value, grid, cfg.boundary_tol)
    x0 = _laplace_samples(cfg.n_chains, cfg.base_seed)
    ts = [float(t) for t in cfg.t_grid]
    taus = list(cfg.tau_grid)
    quad = {}
    emp = {}
    for t in ts:
        quad[t] = M.tv_distance(R.moreau_density_1d(fn, t, grid, cfg.boundary_tol), base)
        for tau in taus:
            step = t / 2.0 if tau == "half-t" else float(tau)
            ens = S.Ensemble(x0.copy(), base_seed=cfg.base_seed, n_threads=n_threads)
            S.run_myula(ens, pot, t, step, int(cfg.n_iters))
            live = ens.live_states()[:, 0]
            emp[(t, tau)] = M.tv_distance(M.histogram_auto(live), base)
    header = ["t", "quadrature"] + [f"tau={tau}" for tau in taus]
    rows = [[t, quad[t]] + [emp[(t, tau)] for tau in taus] for t in ts]
    return [CsvReport("tv_curve.csv", header, rows)], {"quadrature": quad, "empirical": emp}


def _gmm(cfg, n_threads):
    pot = PT.gmm_potential()
    fn = PT.GMM4
    ref = R.density_1d(fn.value, tuple(cfg.grid), cfg.boundary_tol)
    sch = cfg.schedule(0.0)

    def observer(states):
        return float(M.tv_columns(states[:, :1], ref, degenerate="singular")[0])

    reports = []
    data = {}
    budget = sch.total_steps
    for init_kind in cfg.inits:
        init = _init_spec(init_kind, cfg)
        traces = {}
        axis = None
        for kind in cfg.samplers:
            _, axis, vals = _observe(cfg, kind, pot, sch, init, observer, n_threads)
            traces[kind] = np.array(vals, dtype=float)
            reports.append(CsvReport(f"gmm_{init_kind}/tv_{kind}.csv", ["Iterations", "tv"],
                                     [[int(k), v] for k, v in zip(axis, traces[kind])]))
        if axis is None:
            axis = np.arange(0, budget + 1, max(1, cfg.trace_stride))
        gt = np.empty(axis.size)
        for i, k in enumerate(axis):
            g = np.random.Generator(np.random.Philox(
                np.random.SeedSequence([int(cfg.base_seed), int(k), 5])))
            smp = R.sample_gmm(PT.GMM_WEIGHTS, PT.GMM_MEANS, PT.GMM_SIGMAS, cfg.n_chains, g)
            gt[i] = M.tv_distance(M.histogram_auto(smp), ref)
        reports.append(CsvReport(f"gmm_{init_kind}/tv_GT.csv", ["Iterations", "tv"],
                                 [[int(k), v] for k, v in zip(axis, gt)]))
        summary = [[kind, traces[kind][-1], float(np.mean(traces[kind][-50:]))]
                   for kind in cfg.samplers]
        summary.append(["GT", gt[-1], float(np.mean(gt))])
        reports.append(CsvReport(f"gmm_{init_kind}/summary.csv",
                                 ["series", "final_tv", "mean_tv_tail"], summary))
        data[init_kind] = {"axis": axis, "traces": traces, "gt": gt}
    return reports, data


def _select(tv_sites, cfg):
    # tv_sites: iterations x sites
    return M.select_percentile_marginals(np.asarray(tv_sites).T, int(cfg.window),
                                         tuple(cfg.percentiles))


def _percentile_labels(cfg):
    return [f"p{p:g}" for p in cfg.percentiles]


def _neglog_rows(label, site, samples):
    h = M.histogram_auto(samples)
    rows = []
    for c, v in zip(h.centers, h.densities):
        if v > 0:
            rows.append([label, int(site), c, -math.log(v)])
    return rows


def _tv_prior(cfg, n_threads):
    d = int(cfg.dim)
    pot = PT.tv_prior_potential(d, cfg.lam)
    ref = R.density_1d(np.abs, tuple(cfg.grid), cfg.boundary_tol)
    sch = cfg.schedule(0.0)
    proj = S.mean_centering if cfg.projection else None
    init = _init_spec(cfg.inits[0], cfg)

    def observer(states):
        return M.tv_columns(np.diff(states, axis=1), ref, degenerate="singular")

    reports = []
    data = {}
    labels = _percentile_labels(cfg)
    for kind in cfg.samplers:
        ens, axis, vals = _observe(cfg, kind, pot, sch, init, observer, n_threads, proj)
        tv = np.array(vals)  # iterations x (d-1)
        sel = _select(tv, cfg)
        reports.append(CsvReport(f"tv_prior/tv_{kind}.csv", ["Iterations"] + labels,
                                 [[int(k)] + [tv[i, s] for s in sel] for i, k in enumerate(axis)]))
        diffs = np.diff(ens.live_states(), axis=1)
        rows = []
        for lab, s in zip(labels, sel):
            rows += _neglog_rows(lab, s, diffs[:, s])
        reports.append(CsvReport(f"tv_prior/neglog_{kind}.csv", ["percentile", "marginal", "x",
                                                                 "neglog"], rows))
        data[kind] = {"axis": axis, "tv": tv, "selected": sel, "final_diffs": diffs}
    reports.append(CsvReport("tv_prior/selected.csv", ["sampler"] + labels,
                             [[k] + [int(s) for s in data[k]["selected"]] for k in cfg.samplers]))
    return reports, data


def _denoising(cfg, n_threads, pot, bp, y_flat, prefix):
    sch = cfg.schedule(pot.lip_grad_F)
    stride = max(1, int(cfg.site_stride))
    sites = np.arange(0, pot.dim, stride)
    refs = [bp.density(int(s)) for s in sites]
    init = _init_spec(cfg.inits[0], cfg, y_flat)

    def observer(states):
        return M.tv_columns(states[:, sites], refs, degenerate="singular")

    reports = [CsvReport(f"{prefix}/data.csv", ["site", "y"],
                         [[i, v] for i, v in enumerate(y_flat)])]
    rows = []
    for s in sites:
        for xv, pv in zip(bp.labels, bp.marginals[s]):
            rows.append([int(s), xv, pv])
    reports.append(CsvReport(f"{prefix}/bp_marginals.csv", ["site", "x", "p"], rows))
    data = {"sites": sites, "bp": bp}
    labels = _percentile_labels(cfg)
    for kind in cfg.samplers:
        ens, axis, vals = _observe(cfg, kind, pot, sch, init, observer, n_threads)
        tv = np.array(vals)  # iterations x sites
        sel = _select(tv, cfg)
        reports.append(CsvReport(f"{prefix}/tv_{kind}.csv", ["Iterations"] + labels,
                                 [[int(k)] + [tv[i, s] for s in sel] for i, k in enumerate(axis)]))
        u = _potential_series(ens, axis, pot)
        reports.append(CsvReport(f"{prefix}/potential_{kind}.csv", ["Iterations", "U"],
                                 [[int(k), v] for k, v in zip(axis, u)]))
        data[kind] = {"axis": axis, "tv": tv, "selected": sel, "potential": u,
                      "failures": list(ens.failures)}
    reports.append(CsvReport(f"{prefix}/selected.csv", ["sampler"] + labels,
                             [[k] + [int(sites[s]) for s in data[k]["selected"]]
                              for k in cfg.samplers]))
    return reports, data


def _tv_chain(cfg, n_threads):
    y = generate_chain_data(cfg.data_seed, cfg.sigma)
    pot = PT.tv_chain_potential(y, cfg.sigma, cfg.lam)
    spec = R.ChainMRFSpec(y, cfg.sigma, cfg.lam,
                          labels=R.default_labels(y, cfg.n_labels, cfg.label_margin))
    bp = R.bp_chain_marginals(spec)
    return _denoising(cfg, n_threads, pot, bp, y, "tv_chain")


def _tv_image(cfg, n_threads):
    _, y = image_data(cfg)
    pot = PT.tv_image_potential(y, cfg.sigma, cfg.lam, tolerance=cfg.prox_tolerance)
    spec = R.GridMRFSpec(y, cfg.sigma, cfg.lam,
                         labels=R.default_labels(y, cfg.n_labels, cfg.label_margin))
    bp = R.bp_grid_marginals(spec, damping=cfg.bp_damping, max_sweeps=cfg.bp_max_sweeps,
                             tol=cfg.bp_tol)
    reports, data = _denoising(cfg, n_threads, pot, bp, y.reshape(-1), "tv_image")
    reports.append(CsvReport("tv_image/bp_status.csv", ["converged", "residual", "approximate"],
                             [[str(bp.converged).lower(), bp.residual, str(bp.approximate).lower()]]))
    return reports, data


_RUNNERS = {
    "moreau-sweep": _moreau_sweep,
    "laplace-moreau": _laplace_moreau,
    "gmm": _gmm,
    "tv-prior": _tv_prior,
    "tv-chain": _tv_chain,
    "tv-image": _tv_image,
}


def run_experiment(cfg, n_threads=1, write=True, out_dir=None):
    """Validate, run and (optionally) write the reports of one experiment."""
    diags = validate_config(cfg)
    errors = [d for d in diags if d.level == "error"]
    if errors:
        raise ConfigError("; ".join(d.message for d in errors))
    for d in diags:
        log.warning("%s", d.message)
    reports, data = _RUNNERS[cfg.experiment](cfg, n_threads)
    res = ExperimentResult(cfg, reports, data)
    if write:
        res.write(out_dir)
    return res
