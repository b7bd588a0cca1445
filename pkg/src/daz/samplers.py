"""Langevin-type samplers: ULA, MYULA, ALD, SK-ROCK, DAZ and DAZ-SK-ROCK.

All runners advance an :class:`Ensemble` of independent chains in lockstep.
Noise for chain ``c`` comes from a Philox stream keyed by
``(base_seed, c // CHAIN_BLOCK)``, so results do not depend on the number of
worker threads.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

CHAIN_BLOCK = 256
DIVERGENCE_NORM = 1e8

KINDS = ("ULA", "MYULA", "ALD", "SKROCK", "DAZ", "DAZ_SKROCK")


class SamplerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MoreauSchedule:
    """Moreau parameters ``t_1 < ... < t_N`` with step sizes and inner steps ``K``."""

    t_values: np.ndarray
    tau_values: np.ndarray
    inner_steps: int

    def __post_init__(self):
        t = np.asarray(self.t_values, dtype=float)
        tau = np.asarray(self.tau_values, dtype=float)
        object.__setattr__(self, "t_values", t)
        object.__setattr__(self, "tau_values", tau)
        if t.ndim != 1 or t.shape != tau.shape or t.size < 1:
            raise ValueError("t_values and tau_values must be equal-length 1D arrays")
        if np.any(t <= 0) or np.any(tau <= 0):
            raise ValueError("all t_n and tau_n must be positive")
        if np.any(np.diff(t) <= 0):
            raise ValueError("t_values must be strictly increasing with n")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")

    @property
    def levels(self):
        return self.t_values.size

    @property
    def total_steps(self):
        return self.levels * self.inner_steps

    def descending(self):
        """Yield ``(n, t_n, tau_n)`` for ``n = N, ..., 1`` (1-based ``n``)."""
        for i in range(self.levels - 1, -1, -1):
            yield i + 1, float(self.t_values[i]), float(self.tau_values[i])


STEP_POLICIES = ("half-t", "lipschitz")


def loglinear_values(t_small, t_large, N):
    n = np.arange(1, N + 1)
    t = 10.0 ** ((n - 1) / (N - 1) * math.log10(t_large / t_small) + math.log10(t_small))
    t[0], t[-1] = t_small, t_large
    return t


def make_loglinear_schedule(t_small, t_large, N, K, step_policy="half-t", lip_grad_F=None):
    if N < 2:
        raise ValueError("need at least two Moreau levels")
    if not (t_small > 0 and t_large > 0):
        raise ValueError("schedule endpoints must be positive")
    if not t_small < t_large:
        raise ValueError("schedule endpoints inverted")
    t = loglinear_values(t_small, t_large, N)
    if step_policy == "half-t":
        tau = t / 2.0
    elif step_policy == "lipschitz":
        if lip_grad_F is None:
            raise ValueError("step policy 'lipschitz' requires lip_grad_F")
        tau = t / (1.0 + t * lip_grad_F)
    else:
        raise ValueError(f"unknown step policy {step_policy!r}; choose from {STEP_POLICIES}")
    return MoreauSchedule(t, tau, int(K))


def constant_schedule(t, tau, n_steps):
    return MoreauSchedule(np.array([t]), np.array([tau]), int(n_steps))


# ---------------------------------------------------------------------------
# Sampler specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerSpec:
    kind: str
    schedule: MoreauSchedule
    skrock_eta: float = 0.05
    skrock_stages: int = 5
    skrock_step_factor: float = 0.9
    # "max": factor * delta_s^max from the Lipschitz bound; "schedule": tau_n
    skrock_delta: str = "max"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind in ("SKROCK", "DAZ_SKROCK"):
            if self.skrock_stages < 1:
                raise ValueError("skrock_stages must be positive")
            if self.skrock_delta == "max" and self.skrock_stages < 2:
                raise ValueError("SK-ROCK with the maximal step needs at least 2 stages")
            if self.skrock_delta not in ("max", "schedule"):
                raise ValueError(f"unknown skrock_delta policy {self.skrock_delta!r}")


def skrock_coefficients(s, eta):
    """Chebyshev damping parameters ``(omega0, omega1)`` and ``T_j(omega0)``, j=0..s."""
    w0 = 1.0 + eta / s**2
    T = np.empty(s + 1)
    T[0], T[1] = 1.0, w0
    for j in range(2, s + 1):
        T[j] = 2 * w0 * T[j - 1] - T[j - 2]
    # T_s'(w0) = s U_{s-1}(w0)
    U = np.empty(s + 1)
    U[0], U[1] = 1.0, 2 * w0
    for j in range(2, s + 1):
        U[j] = 2 * w0 * U[j - 1] - U[j - 2]
    dT = s * U[s - 1]
    w1 = T[s] / dT
    return w0, w1, T


def skrock_max_step(lipschitz, s=5, eta=0.05):
    """``delta_s^max = ((s - 1/2)^2 (2 - 4 eta / 3) - 3/2) / L``."""
    if lipschitz <= 0:
        raise ValueError("SK-ROCK needs a positive Lipschitz constant")
    ell = (s - 0.5) ** 2 * (2.0 - 4.0 * eta / 3.0) - 1.5
    if ell <= 0:
        raise ValueError(f"no stable SK-ROCK step for s={s}")
    return ell / lipschitz


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def _noise(state, rng, noise):
    if noise is not None:
        return np.asarray(noise, dtype=float)
    if rng is None:
        raise ValueError("either rng or noise must be given")
    return rng.standard_normal(np.shape(state))


def ula_step(state, potential, tau, rng=None, noise=None):
    """``x - tau (grad F(x) + v) + sqrt(2 tau) z`` with ``v`` a subgradient of G."""
    x = np.asarray(state, dtype=float)
    z = _noise(x, rng, noise)
    drift = potential.grad_F(x) + potential.subgrad_G(x)
    return x - tau * drift + math.sqrt(2.0 * tau) * z


def moreau_langevin_step(state, potential, t, tau, rng=None, noise=None):
    """One inner DAZ / MYULA update on ``F + M_G^t``."""
    x = np.asarray(state, dtype=float)
    z = _noise(x, rng, noise)
    p = potential.prox_G(x, t)
    return x - tau * potential.grad_F(x) - (tau / t) * (x - p) + math.sqrt(2.0 * tau) * z


def skrock_step(state, potential, t, delta, spec=None, rng=None, noise=None,
                stages=None, eta=None):
    """One s-stage SK-ROCK update targeting ``exp(-F - M_G^t)``."""
    s = stages if stages is not None else (spec.skrock_stages if spec else 5)
    eta = eta if eta is not None else (spec.skrock_eta if spec else 0.05)
    x = np.asarray(state, dtype=float)
    z = _noise(x, rng, noise)
    w0, w1, T = skrock_coefficients(s, eta)
    q = math.sqrt(2.0 * delta) * z

    def grad(y):
        return potential.moreau_grad(y, t)

    mu1 = w1 / w0
    nu1 = s * w1 / 2.0
    kappa1 = s * w1 / w0
    k_prev = x
    k_cur = x - mu1 * delta * grad(x + nu1 * q) + kappa1 * q
    for j in range(2, s + 1):
        mu = 2.0 * w1 * T[j - 1] / T[j]
        nu = 2.0 * w0 * T[j - 1] / T[j]
        kappa = 1.0 - nu
        k_prev, k_cur = k_cur, -mu * delta * grad(k_cur) + nu * k_cur + kappa * k_prev
    ref = max(1.0, float(np.max(np.abs(x))))
    if not np.all(np.isfinite(k_cur)) or float(np.max(np.abs(k_cur))) > 1e6 * ref:
        raise FloatingPointError("SK-ROCK instability: state norm grew by more than 1e6x")
    return k_cur


# ---------------------------------------------------------------------------
# Ensemble, noise streams and recording
# ---------------------------------------------------------------------------


class ChainNoise:
    """Per-block Philox streams; chain ``c`` lives in block ``c // CHAIN_BLOCK``."""

    def __init__(self, base_seed, n_chains, purpose=0):
        self.blocks = [slice(a, min(a + CHAIN_BLOCK, n_chains))
                       for a in range(0, n_chains, CHAIN_BLOCK)]
        self.gens = [np.random.Generator(np.random.Philox(
            np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, b, purpose])))
            for b in range(len(self.blocks))]

    def normal(self, b, dim):
        sl = self.blocks[b]
        return self.gens[b].standard_normal((sl.stop - sl.start, dim))


@dataclass
class Recorder:
    """What to keep while a sampler runs.

    ``policy`` is one of ``"full"`` (every state), ``"strided"`` (every
    ``stride``-th step plus the last), ``"summary"`` (per-step ensemble mean,
    variance and potential values) or ``"none"``. ``observer(iteration,
    states)`` is called at every step regardless of policy; its return values
    are collected in ``Ensemble.observations``.
    """

    policy: str = "full"
    stride: int = 1
    observer: Optional[Callable[[int, np.ndarray], Any]] = None
    potential: Any = None

    def __post_init__(self):
        if self.policy not in ("full", "strided", "summary", "none"):
            raise ValueError(f"unknown recorder policy {self.policy!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.policy == "summary" and self.potential is None:
            raise ValueError("summary recording needs the potential")


@dataclass
class Ensemble:
    states: np.ndarray
    iteration: int = 0
    base_seed: int = 0
    snapshot_log: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    alive: Optional[np.ndarray] = None
    failures: list = field(default_factory=list)
    n_threads: int = 1
    projection: Optional[Callable] = None
    noise_scale: float = 1.0  # 0 gives the deterministic debugging mode
    step_count: int = 0
    _noise: Optional[ChainNoise] = field(default=None, repr=False)

    def __post_init__(self):
        self.states = np.array(self.states, dtype=float, ndmin=2)
        if not np.all(np.isfinite(self.states)):
            raise ValueError("initial states must be finite")
        if self.alive is None:
            self.alive = np.ones(self.states.shape[0], dtype=bool)

    @property
    def n_chains(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]

    def noise(self):
        if self._noise is None:
            self._noise = ChainNoise(self.base_seed, self.n_chains)
        return self._noise

    def live_states(self):
        return self.states[self.alive]


def _record(ens, recorder, last=False):
    if recorder is None:
        return
    pol = recorder.policy
    if pol == "full" or (pol == "strided" and (ens.step_count % recorder.stride == 0 or last)):
        ens.snapshot_log.append((ens.iteration, ens.states.copy()))
    elif pol == "summary":
        live = ens.live_states()
        u = recorder.potential.energy(live)
        ens.snapshot_log.append((ens.iteration, {
            "mean": live.mean(axis=0), "var": live.var(axis=0),
            "U_first": float(recorder.potential.energy(ens.states[0])), "U_mean": float(u.mean()),
        }))
    if recorder.observer is not None:
        ens.observations.append((ens.iteration, recorder.observer(ens.iteration, ens.live_states())))


def _simulate(ens, phases, recorder, where):
    """Run ``phases``: a list of ``(n_steps, step_fn, increment, label)``.

    ``step_fn(x_block, z_block)`` returns the advanced block.
    """
    noise = ens.noise()
    d = ens.dim
    if ens.iteration == 0 and ens.step_count == 0:
        _record(ens, recorder)
    pool = ThreadPoolExecutor(ens.n_threads) if ens.n_threads > 1 else None

    def advance(b, step_fn):
        sl = noise.blocks[b]
        z = noise.normal(b, d)
        if ens.noise_scale != 1.0:
            z = z * ens.noise_scale
        x = ens.states[sl]
        x_new = step_fn(x, z)
        if ens.projection is not None:
            x_new = ens.projection(x_new)
        with np.errstate(over="ignore", invalid="ignore"):
            norms = np.sqrt(np.sum(x_new * x_new, axis=1))
        bad = ~np.isfinite(norms) | (norms > DIVERGENCE_NORM)
        alive = ens.alive[sl]
        newly = bad & alive
        if np.any(newly):
            for c in np.flatnonzero(newly) + sl.start:
                ens.failures.append((int(c), ens.iteration, "state norm exceeded divergence guard"))
            alive = alive & ~bad
            ens.alive[sl] = alive
        ens.states[sl] = np.where(alive[:, None], x_new, x)

    try:
        n_phases = len(phases)
        for pi, (n_steps, step_fn, increment, label) in enumerate(phases):
            for k in range(n_steps):
                try:
                    if pool is None:
                        for b in range(len(noise.blocks)):
                            advance(b, step_fn)
                    else:
                        list(pool.map(lambda b: advance(b, step_fn), range(len(noise.blocks))))
                except (FloatingPointError, ArithmeticError, RuntimeError, ValueError) as exc:
                    raise SamplerError(f"{where}: {label}, inner step k={k + 1}: {exc}") from exc
                ens.iteration += increment
                ens.step_count += 1
                _record(ens, recorder, last=(pi == n_phases - 1 and k == n_steps - 1))
    finally:
        if pool is not None:
            pool.shutdown()
    if ens.failures:
        log.warning("%s: %d chain(s) failed", where, len({c for c, _, _ in ens.failures}))
    return ens


# ---------------------------------------------------------------------------
# Runners
# ---------------------------------------------------------------------------


def _ula_phase(potential, tau, n_steps, label):
    def step(x, z):
        return ula_step(x, potential, tau, noise=z)
    return (n_steps, step, 1, label)


def _moreau_phase(potential, t, tau, n_steps, label):
    def step(x, z):
        return moreau_langevin_step(x, potential, t, tau, noise=z)
    return (n_steps, step, 1, label)


def _skrock_phase(potential, t, delta, n_steps, s, eta, label):
    def step(x, z):
        return skrock_step(x, potential, t, delta, noise=z, stages=s, eta=eta)
    return (n_steps, step, s, label)


def run_daz(ensemble, potential, schedule, recorder=None):
    """Annealed Moreau-Langevin sampling over levels ``n = N, ..., 1``."""
    phases = [_moreau_phase(potential, t, tau, schedule.inner_steps, f"level n={n} (t={t:.3g})")
              for n, t, tau in schedule.descending()]
    return _simulate(ensemble, phases, recorder, "DAZ")


def run_myula(ensemble, potential, t1, tau1, n_iters, recorder=None):
    return _simulate(ensemble, [_moreau_phase(potential, t1, tau1, n_iters, "level n=1")],
                     recorder, "MYULA")


def run_ula(ensemble, potential, tau, n_iters, recorder=None):
    """Subgradient ULA on the original potential with a fixed step."""
    return _simulate(ensemble, [_ula_phase(potential, tau, n_iters, "fixed step")], recorder, "ULA")


def run_ald(ensemble, potential, schedule, recorder=None):
    """Subgradient ULA on ``U`` with each ``tau_n`` repeated ``K`` times, ``n = N..1``."""
    phases = [_ula_phase(potential, tau, schedule.inner_steps, f"level n={n} (tau={tau:.3g})")
              for n, _, tau in schedule.descending()]
    return _simulate(ensemble, phases, recorder, "ALD")


def _skrock_delta(potential, t, tau, spec):
    if spec.skrock_delta == "schedule":
        return tau
    if potential.lip_grad_F is None:
        raise ValueError("SK-ROCK needs lip_grad_F metadata on the potential")
    L = potential.lip_grad_F + 1.0 / t
    return spec.skrock_step_factor * skrock_max_step(L, spec.skrock_stages, spec.skrock_eta)


def run_skrock(ensemble, potential, t, n_updates, spec, recorder=None, tau=None):
    """Fixed-``t`` SK-ROCK; each update advances the iteration counter by ``s``."""
    delta = _skrock_delta(potential, t, tau, spec)
    phase = _skrock_phase(potential, t, delta, n_updates, spec.skrock_stages, spec.skrock_eta,
                          f"t={t:.3g}")
    return _simulate(ensemble, [phase], recorder, "SKROCK")


def run_daz_skrock(ensemble, potential, schedule, spec, recorder=None):
    """DAZ outer loop with ``K`` SK-ROCK updates per level."""
    phases = []
    for n, t, tau in schedule.descending():
        delta = _skrock_delta(potential, t, tau, spec)
        phases.append(_skrock_phase(potential, t, delta, schedule.inner_steps, spec.skrock_stages,
                                    spec.skrock_eta, f"level n={n} (t={t:.3g})"))
    return _simulate(ensemble, phases, recorder, "DAZ_SKROCK")


# ---------------------------------------------------------------------------
# Ensemble orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitSpec:
    """``kind`` is ``"dirac"`` (x0), ``"gaussian"`` (mean, var) or ``"states"``."""

    kind: str
    x0: Any = 0.0
    mean: Any = 0.0
    var: Any = 1.0
    states: Any = None

    def draw(self, n_chains, dim, base_seed):
        if self.kind == "dirac":
            return np.broadcast_to(np.asarray(self.x0, dtype=float), (n_chains, dim)).copy()
        if self.kind == "gaussian":
            gen = ChainNoise(base_seed, n_chains, purpose=1)
            z = np.concatenate([gen.normal(b, dim) for b in range(len(gen.blocks))])
            return np.asarray(self.mean, dtype=float) + np.sqrt(np.asarray(self.var, dtype=float)) * z
        if self.kind == "states":
            s = np.array(self.states, dtype=float, ndmin=2)
            if s.shape != (n_chains, dim):
                raise ValueError(f"custom states have shape {s.shape}, expected {(n_chains, dim)}")
            return s
        raise ValueError(f"unknown init kind {self.kind!r}")


def mean_centering(x):
    """Project each chain onto the zero-mean subspace."""
    return x - x.mean(axis=-1, keepdims=True)


def skrock_budget_schedule(schedule, s):
    """Schedule for DAZ-SK-ROCK with the same endpoints and about ``N*K/s`` updates.

    Each SK-ROCK update counts as ``s`` iterations, so this keeps the iteration
    budget of the plain schedule.
    """
    if schedule.inner_steps >= s:
        return MoreauSchedule(schedule.t_values, schedule.tau_values, schedule.inner_steps // s)
    n_levels = max(1, math.ceil(schedule.total_steps / s))
    if n_levels == 1 or schedule.levels == 1:
        return MoreauSchedule(schedule.t_values[:1], schedule.tau_values[:1], 1)
    t = loglinear_values(schedule.t_values[0], schedule.t_values[-1], n_levels)
    ratio = schedule.tau_values[0] / schedule.t_values[0]
    return MoreauSchedule(t, t * ratio, 1)


def run_ensemble(spec, potential, init, n_chains, base_seed, recorder=None, n_threads=1,
                 projection=None, n_iters=None, noise_scale=1.0):
    """Draw initial states and run the sampler ``spec.kind``.

    ``n_iters`` is the iteration budget for the fixed-parameter samplers (ULA,
    MYULA, SKROCK); it defaults to ``N * K`` of the schedule. Iterations of the
    SK-ROCK variants are counted as ``s`` per update.
    """
    states = init.draw(n_chains, potential.dim, base_seed)
    if projection is not None:
        states = projection(states)
    ens = Ensemble(states=states, base_seed=base_seed, n_threads=n_threads,
                   projection=projection, noise_scale=noise_scale)
    sch = spec.schedule
    budget = n_iters if n_iters is not None else sch.total_steps
    t1, tau1 = float(sch.t_values[0]), float(sch.tau_values[0])
    kind = spec.kind
    if kind == "ULA":
        return run_ula(ens, potential, tau1, budget, recorder)
    if kind == "MYULA":
        return run_myula(ens, potential, t1, tau1, budget, recorder)
    if kind == "ALD":
        return run_ald(ens, potential, sch, recorder)
    if kind == "DAZ":
        return run_daz(ens, potential, sch, recorder)
    if kind == "SKROCK":
        n_up = max(1, math.ceil(budget / spec.skrock_stages))
        return run_skrock(ens, potential, t1, n_up, spec, recorder, tau=tau1)
    if kind == "DAZ_SKROCK":
        return run_daz_skrock(ens, potential, sch, spec, recorder)
    raise ValueError(kind)
