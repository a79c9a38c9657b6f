"""VMC and fixed-population DMC with stochastic reconfiguration.

DMC weights are split as ``w = exp(tau * E_T) * u`` with
``u = exp(-tau/2 (E_L(R') + E_L(R)))``.  Only ``u`` enters the reconfiguration
probabilities and the global weight product, so E_T changes the magnitude of
``w`` (and the clamp test) but never the sampled distribution or the
estimator.  Each generation contributes

    G_t * sum_i u_i E_L(R'_i),     G_t = prod over the l preceding generations of mean(u)

to the block sums, which keeps block sums additive across block boundaries.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .wavefunction import PsiState, TrialWavefunction

MODES = ("vmc", "dmc")
LOG_CLAMP = 10.0
DEFAULT_WALKERS = 100
DEFAULT_WINDOW = 10


class PopulationCollapse(RuntimeError):
    pass


@dataclass
class SamplerParams:
    mode: str = "dmc"
    tau: float = 0.01
    steps: int = 100
    walkers: int = DEFAULT_WALKERS
    window: int = DEFAULT_WINDOW
    log_clamp: float = LOG_CLAMP

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.steps < 1:
            raise ValueError("steps per block must be >= 1")
        if self.walkers < 1:
            raise ValueError("walkers must be >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")


@dataclass
class Population:
    """M walkers stored as one batched PsiState plus the global-weight window."""

    state: PsiState
    age: np.ndarray
    log_window: deque = field(default_factory=deque)

    @property
    def size(self) -> int:
        return self.state.n_walkers

    @property
    def R(self) -> np.ndarray:
        return self.state.R

    @property
    def generation_weight_log(self) -> float:
        return float(sum(self.log_window))


@dataclass
class StepStats:
    """Accumulator deltas produced by one step."""

    sum_w: float = 0.0
    sum_we: float = 0.0
    sum_we2: float = 0.0
    accepted: int = 0
    proposed: int = 0
    clamped: int = 0
    node_rejections: int = 0


@dataclass
class BlockAccumulator:
    sum_w: float = 0.0
    sum_we: float = 0.0
    sum_we2: float = 0.0
    steps: int = 0
    walkers: int = 0
    accepted: int = 0
    proposed: int = 0
    clamped: int = 0
    node_rejections: int = 0
    cpu_seconds: float = 0.0
    wall_seconds: float = 0.0
    counters: dict = field(default_factory=dict)

    def add(self, s: StepStats) -> None:
        self.sum_w += s.sum_w
        self.sum_we += s.sum_we
        self.sum_we2 += s.sum_we2
        self.accepted += s.accepted
        self.proposed += s.proposed
        self.clamped += s.clamped
        self.node_rejections += s.node_rejections
        self.steps += 1


@dataclass
class BlockResult:
    mode: str
    tau: float
    steps: int
    walkers: int
    sum_w: float
    sum_we: float
    sum_we2: float
    accepted: int
    proposed: int
    clamped: int
    node_rejections: int
    cpu_seconds: float
    wall_seconds: float
    e_trial: float
    counters: dict
    truncated: bool
    final_R: np.ndarray = field(repr=False)
    final_E: np.ndarray = field(repr=False)

    @property
    def energy(self) -> float:
        return self.sum_we / self.sum_w

    @property
    def variance(self) -> float:
        e = self.energy
        return self.sum_we2 / self.sum_w - e * e

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0


# -- elementary operations -------------------------------------------------

def drift_diffuse(R, drift, tau: float, eta) -> np.ndarray:
    """R' = R + tau b(R) + sqrt(tau) eta."""
    return R + tau * drift + math.sqrt(tau) * eta


def branching_weight(e_old, e_new, e_trial: float, tau: float, log_clamp: float = LOG_CLAMP):
    """Symmetric weight exp(-tau/2 [(E_new - E_T) + (E_old - E_T)]) clamped to [e^-c, e^c]."""
    logw = -0.5 * tau * ((np.asarray(e_new) - e_trial) + (np.asarray(e_old) - e_trial))
    return np.exp(np.clip(logw, -log_clamp, log_clamp))


def reconfiguration_probabilities(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not (np.all(w >= 0) and np.isfinite(total) and total > 0):
        raise PopulationCollapse("reconfiguration needs non-negative weights with a positive finite sum")
    return w / total


def reconfigure(weights, rng: np.random.Generator):
    """Draw M indices with replacement with probabilities p_k = w_k / sum(w).

    Returns ``(indices, sum(w) / M)``; indices come in ascending order.
    """
    w = np.asarray(weights, dtype=np.float64)
    p = reconfiguration_probabilities(w)
    counts = rng.multinomial(len(w), p)
    return np.repeat(np.arange(len(w)), counts), float(w.sum() / len(w))


def _stripped_logs(e_old, e_new, e_trial, tau, log_clamp):
    # log u = log w - tau E_T, recomputed only where the clamp moved log w
    s = -0.5 * tau * (e_new + e_old)
    logw = s + tau * e_trial
    hit = (logw > log_clamp) | (logw < -log_clamp)
    if hit.any():
        s = np.where(hit, np.clip(logw, -log_clamp, log_clamp) - tau * e_trial, s)
    return s, int(hit.sum())


def dmc_step(pop: Population, wf: TrialWavefunction, tau: float, e_trial: float, rng: np.random.Generator,
             window: int = DEFAULT_WINDOW, log_clamp: float = LOG_CLAMP) -> tuple[Population, StepStats]:
    """Drift-diffusion move, branching weights, reconfiguration.

    Moves landing on a node or crossing one (sign flip) are rejected; the
    walker then stays and its weight uses E_L at the unmoved point.
    """
    old = pop.state
    M = old.n_walkers
    eta = rng.standard_normal(old.R.shape)
    new = wf.evaluate(drift_diffuse(old.R, old.drift, tau, eta))
    ok = ~new.node & (new.sign == old.sign)
    moved = old.where(ok, new)
    e_new = moved.local_energy
    s, clamped = _stripped_logs(old.local_energy, e_new, e_trial, tau, log_clamp)
    smax = s.max()
    u = np.exp(s - smax)
    usum = u.sum()
    if not (np.isfinite(usum) and usum > 0):
        raise PopulationCollapse("all branching weights vanished")
    scale = math.exp(sum(pop.log_window) + smax)
    stats = StepStats(
        sum_w=scale * usum,
        sum_we=scale * float(u @ e_new),
        sum_we2=scale * float(u @ (e_new * e_new)),
        accepted=int(ok.sum()),
        proposed=M,
        clamped=clamped,
        node_rejections=int((~ok).sum()),
    )
    idx, _ = reconfigure(u, rng)
    log_window = pop.log_window.copy()
    if window > 0:
        log_window.append(smax + math.log(usum / M))
        while len(log_window) > window:
            log_window.popleft()
    age = np.where(ok, 0, pop.age + 1)[idx]
    return Population(moved.take(idx), age, log_window), stats


def vmc_step(pop: Population, wf: TrialWavefunction, tau: float, rng: np.random.Generator) -> tuple[Population, StepStats]:
    """Metropolis step with drift-diffusion proposal; all electrons of a walker move together."""
    old = pop.state
    M = old.n_walkers
    eta = rng.standard_normal(old.R.shape)
    Rn = drift_diffuse(old.R, old.drift, tau, eta)
    new = wf.evaluate(Rn)
    back = old.R - Rn - tau * np.where(new.node[:, None, None], 0.0, new.drift)
    log_fwd = -0.5 * np.einsum("wik,wik->w", eta, eta)
    log_bwd = -np.einsum("wik,wik->w", back, back) / (2.0 * tau)
    with np.errstate(invalid="ignore"):
        log_ratio = 2.0 * (new.log_psi - old.log_psi) + log_bwd - log_fwd
    accept = ~new.node & (np.log(rng.uniform(size=M)) < log_ratio)
    cur = old.where(accept, new)
    e = cur.local_energy
    stats = StepStats(float(M), float(e.sum()), float(e @ e), int(accept.sum()), M, 0, int(new.node.sum()))
    age = np.where(accept, 0, pop.age + 1)
    return Population(cur, age, pop.log_window), stats


# -- populations and blocks ------------------------------------------------

def initial_positions(wf: TrialWavefunction, n_walkers: int, rng: np.random.Generator) -> np.ndarray:
    spec, H = wf.spec, wf.hamiltonian
    N = spec.n_electrons
    if H.kind == "harmonic":
        return rng.normal(scale=1.0 / math.sqrt(H.omega), size=(n_walkers, N, 3))
    q = np.clip(H.charges, 0.0, None)
    p = q / q.sum() if q.sum() > 0 else np.full(len(q), 1.0 / len(q))
    site = rng.choice(len(q), size=(n_walkers, N), p=p)
    return H.positions[site] + rng.normal(size=(n_walkers, N, 3))


def make_population(wf: TrialWavefunction, n_walkers: int, rng: np.random.Generator,
                    start: np.ndarray | None = None, max_tries: int = 100) -> Population:
    """Population of ``n_walkers``, cycling through ``start`` configurations if given.

    Configurations on a node are redrawn.
    """
    N = wf.spec.n_electrons
    if start is not None and len(start):
        start = np.asarray(start, dtype=np.float64).reshape(-1, N, 3)
        R = start[np.arange(n_walkers) % len(start)].copy()
    else:
        R = initial_positions(wf, n_walkers, rng)
    st = wf.evaluate(R)
    for _ in range(max_tries):
        if not st.node.any():
            break
        fresh = wf.evaluate(initial_positions(wf, n_walkers, rng))
        st = st.where(st.node, fresh)
    else:
        raise PopulationCollapse("could not place walkers away from nodes")
    return Population(st, np.zeros(n_walkers, dtype=np.int64), deque())


def equilibrate(pop: Population, wf: TrialWavefunction, params: SamplerParams, n_steps: int,
                rng: np.random.Generator, e_trial: float | None = None,
                stop: Callable[[], bool] | None = None) -> Population:
    """Untallied steps; DMC warm-up also fills the global-weight window."""
    for _ in range(n_steps):
        if stop is not None and stop():
            break
        if params.mode == "vmc":
            pop, _ = vmc_step(pop, wf, params.tau, rng)
        else:
            et = e_trial if e_trial is not None else float(np.mean(pop.state.local_energy))
            pop, _ = dmc_step(pop, wf, params.tau, et, rng, params.window, params.log_clamp)
    return pop


def run_block(pop: Population, wf: TrialWavefunction, params: SamplerParams, rng: np.random.Generator,
              e_trial: float | None = None, stop: Callable[[], bool] | None = None,
              max_steps: int | None = None) -> tuple[Population, BlockResult]:
    """Run up to ``params.steps`` steps; ``stop()`` is polled at every step boundary.

    A stop truncates the block: the result covers exactly the completed steps.
    """
    if e_trial is None:
        e_trial = float(np.mean(pop.state.local_energy))
    target = params.steps if max_steps is None else min(params.steps, max_steps)
    acc = BlockAccumulator(walkers=pop.size)
    before = wf.counters.snapshot()
    c0, w0 = time.process_time(), time.perf_counter()
    truncated = False
    while acc.steps < target:
        if stop is not None and stop():
            truncated = True
            break
        if params.mode == "vmc":
            pop, s = vmc_step(pop, wf, params.tau, rng)
        else:
            pop, s = dmc_step(pop, wf, params.tau, e_trial, rng, params.window, params.log_clamp)
        acc.add(s)
    after = wf.counters.snapshot()
    result = BlockResult(
        mode=params.mode, tau=params.tau, steps=acc.steps, walkers=acc.walkers,
        sum_w=acc.sum_w, sum_we=acc.sum_we, sum_we2=acc.sum_we2,
        accepted=acc.accepted, proposed=acc.proposed, clamped=acc.clamped,
        node_rejections=acc.node_rejections,
        cpu_seconds=time.process_time() - c0, wall_seconds=time.perf_counter() - w0,
        e_trial=float(e_trial),
        counters={k: after[k] - before[k] for k in after},
        truncated=truncated or acc.steps < params.steps,
        final_R=pop.R.copy(), final_E=pop.state.local_energy.copy(),
    )
    return pop, result


class Sampler:
    """One worker's population with its E_T bookkeeping across blocks."""

    def __init__(self, wf: TrialWavefunction, params: SamplerParams, seed,
                 start: np.ndarray | None = None, warmup_steps: int = 0,
                 stop: Callable[[], bool] | None = None):
        self.wf = wf
        self.params = params
        self.rng = np.random.default_rng(seed)
        self.population = make_population(wf, params.walkers, self.rng, start)
        self._sum_w = 0.0
        self._sum_we = 0.0
        e0 = float(np.mean(self.population.state.local_energy))
        self.population = equilibrate(self.population, wf, params, warmup_steps, self.rng, e0, stop)
        self._e0 = float(np.mean(self.population.state.local_energy))

    @property
    def e_trial(self) -> float:
        return self._sum_we / self._sum_w if self._sum_w > 0 else self._e0

    def run_block(self, stop: Callable[[], bool] | None = None) -> BlockResult:
        self.population, res = run_block(self.population, self.wf, self.params, self.rng, self.e_trial, stop)
        if res.steps:
            self._sum_w += res.sum_w
            self._sum_we += res.sum_we
        return res

