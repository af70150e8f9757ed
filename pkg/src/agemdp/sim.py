"""Pathwise simulation by thinning, plus Monte Carlo cost estimators.

Candidate jump epochs arrive at the uniform majorant rate ``M``; at each
candidate the interval ``[0, M)`` is partitioned into consecutive
left-closed subintervals of length equal to the current relaxed jump
rates, laid out in ascending target-state order starting at 0, and a
uniform draw picks the jump (or no jump).  Between candidates the age
grows at unit rate and the running cost is integrated along the
deterministic age trajectory.

Randomness comes from the counter-based Philox generator, keyed per path
by ``SeedSequence((master_seed, path_index))`` and consumed in candidate
order (gap, thinning draw, then any action draws), so runs are replayable
and independent of the degree of parallelism.  The worker count is read
from ``AGEMDP_THREADS`` (0 or unset = auto); per-path results are reduced
in path-index order, so estimates do not depend on it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import TransitionRateModel
from .reduction import AgePolicy

# chunk length for the cost quadrature between candidates; three-point
# Gauss-Legendre per chunk keeps the integration error far below the
# Monte Carlo noise for the bounded smooth-in-age costs handled here
_COST_CHUNK = 0.25
_GL_X = (-math.sqrt(0.6), 0.0, math.sqrt(0.6))
_GL_W = (5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0)


def worker_count() -> int:
    """Worker bound from AGEMDP_THREADS (0 or unset selects automatically)."""
    raw = os.environ.get("AGEMDP_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"AGEMDP_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ValueError("AGEMDP_THREADS must be nonnegative")
    if n == 0:
        return min(os.cpu_count() or 1, 4)
    return n


def _map_ordered(fn, n: int):
    """Apply ``fn`` to 0..n-1, reducing results in index order regardless of
    the executing worker count."""
    workers = worker_count()
    if workers <= 1 or n <= 1:
        return [fn(k) for k in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One simulated path: jump epochs, visited states and accumulated cost.

    ``states[0]`` is the start state at time 0 (age 0); ``jump_times[n]``
    is the epoch of the (n+1)-th jump, after which the state is
    ``states[n + 1]`` with age reset to 0.  ``Z[n]`` is the raw cost
    accumulated up to ``jump_times[n]``.
    """

    states: np.ndarray
    jump_times: np.ndarray
    sojourns: np.ndarray
    Z: np.ndarray
    cost_discounted: float
    cost_raw: float
    alpha: float
    horizon: float
    n_candidates: int
    seed: tuple


@dataclass(frozen=True, eq=False)
class McEstimate:
    estimator: str
    mean: float
    se: float
    n: int
    truncation_bound: float


@dataclass(frozen=True, eq=False)
class McAverageResult:
    """Ratio and regenerative estimates of the long-run average cost."""

    ratio: McEstimate
    cycle: McEstimate | None
    renewal_state: int
    n_jumps: int


class _PathEngine:
    """Pre-resolved policy lookups for the hot simulation loop."""

    def __init__(self, model: TransitionRateModel, policy: AgePolicy):
        if policy.n_states != model.n_states or policy.n_actions != model.n_actions:
            raise ValueError("policy shape does not match the model")
        self.model = model
        self.nodes = policy.grid.nodes
        self.y_max = policy.grid.y_max
        self.targets = [[j for j in model.states if j != i] for i in model.states]
        # per (state, node): indices of positive-weight actions and weights
        nS, nN, _ = policy.weights.shape
        self.support = np.empty((nS, nN), dtype=object)
        self.weights = np.empty((nS, nN), dtype=object)
        self.single = np.full((nS, nN), -1, dtype=int)
        for i in range(nS):
            for k in range(nN):
                w = policy.weights[i, k]
                sup = np.flatnonzero(w > 0.0)
                self.support[i, k] = sup
                self.weights[i, k] = w[sup]
                if sup.size == 1:
                    self.single[i, k] = sup[0]

    def cell_of(self, y: float) -> int:
        k = int(np.searchsorted(self.nodes, y, side="right")) - 1
        return min(max(k, 0), self.nodes.size - 1)

    def draw_action(self, i: int, cell: int, rng) -> int:
        u = self.single[i, cell]
        if u >= 0:
            return int(u)
        return int(rng.choice(self.support[i, cell], p=self.weights[i, cell]))

    def relaxed_rates(self, i: int, y: float, cell: int):
        """Relaxed jump rates out of ``i`` at age ``y`` in ascending target
        order, paired with their targets."""
        sup = self.support[i, cell]
        w = self.weights[i, cell]
        rates = []
        for j in self.targets[i]:
            if sup.size == 1:
                r = float(self.model.rate(i, j, y, self.model.actions[sup[0]]))
            else:
                r = 0.0
                for wu, ui in zip(w, sup):
                    r += wu * float(self.model.rate(i, j, y, self.model.actions[ui]))
            rates.append(r)
        return rates

    def cost_segment(self, i: int, y0: float, y1: float, t0: float,
                     alpha: float, rng):
        """Integrate the cost rate while the age runs from ``y0`` to ``y1``
        (time ``t0`` at age ``y0``), drawing the action once per overlap of
        the segment with a policy age cell.  Returns (discounted, raw)."""
        disc = 0.0
        raw = 0.0
        model = self.model
        a = y0
        while a < y1 - 1e-15:
            cell = self.cell_of(a)
            b = y1 if cell >= self.nodes.size - 1 else min(y1, float(self.nodes[cell + 1]))
            if b <= a:
                b = y1
            u = model.actions[self.draw_action(i, cell, rng)]
            n_chunks = max(1, int(math.ceil((b - a) / _COST_CHUNK)))
            edges = np.linspace(a, b, n_chunks + 1)
            for lo, hi in zip(edges[:-1], edges[1:]):
                mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
                ys = np.array([mid + half * x for x in _GL_X])
                cs = np.asarray(model.cost(i, ys, u), dtype=float)
                cs = np.broadcast_to(cs, ys.shape)
                wlen = 2.0 * half
                raw_part = wlen * float(np.dot(_GL_W, cs))
                raw += raw_part
                if alpha > 0.0:
                    ts = t0 + (ys - y0)
                    disc += wlen * float(np.dot(_GL_W, cs * np.exp(-alpha * ts)))
            a = b
        if alpha == 0.0:
            disc = raw
        return disc, raw


def _rng_for(seed) -> tuple[np.random.Generator, tuple]:
    entropy = tuple(int(s) for s in (seed if isinstance(seed, (tuple, list)) else (seed,)))
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
    return gen, entropy


def _simulate(model: TransitionRateModel, engine: _PathEngine, start_state: int,
              rng, horizon: float, alpha: float, max_jumps: int | None):
    M = model.M
    t = 0.0
    age = 0.0
    state = int(start_state)
    states = [state]
    jump_times: list = []
    sojourns: list = []
    Z: list = []
    disc_total = 0.0
    raw_total = 0.0
    last_jump = 0.0
    n_candidates = 0
    while True:
        if max_jumps is not None and len(jump_times) >= max_jumps:
            break
        gap = rng.exponential(1.0 / M)
        t_cand = t + gap
        if t_cand >= horizon:
            d, r = engine.cost_segment(state, age, age + (horizon - t), t, alpha, rng)
            disc_total += d
            raw_total += r
            break
        n_candidates += 1
        d, r = engine.cost_segment(state, age, age + gap, t, alpha, rng)
        disc_total += d
        raw_total += r
        age += gap
        t = t_cand
        z = rng.uniform(0.0, M)
        cell = engine.cell_of(age)
        acc = 0.0
        jumped_to = -1
        for j, rate in zip(engine.targets[state], engine.relaxed_rates(state, age, cell)):
            acc += rate
            if z < acc:
                jumped_to = j
                break
        if jumped_to >= 0:
            jump_times.append(t)
            sojourns.append(t - last_jump)
            Z.append(raw_total)
            states.append(jumped_to)
            last_jump = t
            state = jumped_to
            age = 0.0
    return Trajectory(
        states=np.asarray(states, dtype=int),
        jump_times=np.asarray(jump_times, dtype=float),
        sojourns=np.asarray(sojourns, dtype=float),
        Z=np.asarray(Z, dtype=float),
        cost_discounted=disc_total,
        cost_raw=raw_total,
        alpha=alpha,
        horizon=horizon,
        n_candidates=n_candidates,
        seed=(),
    )


def simulate_path(model: TransitionRateModel, policy: AgePolicy, start_state: int,
                  horizon: float, seed, alpha: float = 0.0,
                  max_jumps: int | None = None) -> Trajectory:
    """Simulate one path by thinning; identical seeds give identical paths."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if start_state not in model.states:
        raise ValueError(f"unknown start state {start_state!r}")
    engine = _PathEngine(model, policy)
    rng, entropy = _rng_for(seed)
    traj = _simulate(model, engine, start_state, rng, horizon, alpha, max_jumps)
    object.__setattr__(traj, "seed", entropy)
    return traj


def default_horizon(model: TransitionRateModel, alpha: float,
                    truncation: float) -> float:
    """Horizon making the discarded discounted tail at most ``truncation``."""
    return math.log(model.C_tilde / (alpha * truncation)) / alpha if \
        model.C_tilde > 0 else 1.0 / alpha


def mc_discounted(model: TransitionRateModel, policy: AgePolicy, alpha: float,
                  n_paths: int, horizon: float | None = None,
                  master_seed: int = 0, start_state: int = 0,
                  truncation: float = 1e-3) -> McEstimate:
    """Monte Carlo estimate of the discounted cost from ``start_state``.

    Path ``p`` uses the seed ``(master_seed, p)``; the sample mean is
    accumulated in path order.  The reported truncation bound covers the
    discarded tail beyond the horizon.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if n_paths < 1:
        raise ValueError("need at least one path")
    if horizon is None:
        horizon = default_horizon(model, alpha, truncation)
    engine = _PathEngine(model, policy)

    def one(p: int) -> float:
        rng, _ = _rng_for((master_seed, p))
        return _simulate(model, engine, start_state, rng, horizon, alpha, None
                         ).cost_discounted
    vals = np.asarray(_map_ordered(one, n_paths), dtype=float)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    bound = model.C_tilde * math.exp(-alpha * horizon) / alpha
    return McEstimate(estimator="discounted", mean=mean, se=se, n=n_paths,
                      truncation_bound=bound)


def _ratio_se(costs: np.ndarray, lengths: np.ndarray) -> float:
    """Delta-method standard error of sum(costs)/sum(lengths) over i.i.d.
    (cost, length) pairs."""
    n = costs.size
    if n < 2:
        return math.inf
    lbar = float(lengths.mean())
    r = float(costs.sum() / lengths.sum())
    s_cc = float(np.var(costs, ddof=1))
    s_ll = float(np.var(lengths, ddof=1))
    s_cl = float(np.cov(costs, lengths, ddof=1)[0, 1])
    var = (s_cc - 2.0 * r * s_cl + r * r * s_ll) / (n * lbar * lbar)
    return math.sqrt(max(var, 0.0))


def mc_average(model: TransitionRateModel, policy: AgePolicy, n_jumps: int,
               master_seed: int = 0, start_state: int = 0,
               renewal_state: int | None = None,
               n_batches: int = 20) -> McAverageResult:
    """Long-run average cost estimates from one long path.

    Reports the plain ratio estimator (accumulated cost over elapsed time
    at the last jump, standard error by batch means) and, when the path
    returns to the renewal state at least twice, the regenerative cycle
    estimator with a delta-method standard error.
    """
    if n_jumps < 2:
        raise ValueError("need at least two jumps")
    renewal = start_state if renewal_state is None else renewal_state
    engine = _PathEngine(model, policy)
    rng, _ = _rng_for((master_seed,))
    traj = _simulate(model, engine, start_state, rng, math.inf, 0.0, n_jumps)
    T, Z = traj.jump_times, traj.Z
    ratio_mean = float(Z[-1] / T[-1])
    edges = np.linspace(0, n_jumps, n_batches + 1).astype(int)
    bc = np.diff(np.concatenate(([0.0], Z))[edges])
    bl = np.diff(np.concatenate(([0.0], T))[edges])
    ratio = McEstimate(estimator="avg_ratio", mean=ratio_mean,
                       se=_ratio_se(bc, bl), n=n_jumps, truncation_bound=0.0)
    # regenerative cycles split at entries into the renewal state
    entries = np.flatnonzero(traj.states[1:] == renewal)
    cycle = None
    if entries.size >= 2:
        cyc_costs = np.diff(Z[entries])
        cyc_lens = np.diff(T[entries])
        cycle = McEstimate(
            estimator="avg_cycle",
            mean=float(cyc_costs.sum() / cyc_lens.sum()),
            se=_ratio_se(cyc_costs, cyc_lens),
            n=int(entries.size - 1),
            truncation_bound=0.0,
        )
    return McAverageResult(ratio=ratio, cycle=cycle, renewal_state=renewal,
                           n_jumps=n_jumps)
