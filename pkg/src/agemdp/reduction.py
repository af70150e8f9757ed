"""Jump-to-jump reduction of an age-dependent model on an age grid.

For a state ``i`` and an age-to-action map ``r`` the reduced process is
described by a survival curve, a one-stage discounted cost, an embedded
transition row, conditional sojourn distributions, an expected sojourn and
discounted transfer coefficients.

Discretization.  Ages are truncated at ``y_max``; beyond it rates and
costs are frozen at their ``y_max`` values, so the tail integrals are
exponential and computed in closed form.  Within each grid cell the
(relaxed) coefficients are frozen at the mean of their endpoint values,
which makes the cumulative hazard the composite-trapezoid integral of the
exit rate and every cell integral a closed form.  The discrete tables are
therefore the *exact* reduction of a nearby model in the same admissible
class: embedded rows sum to one at machine precision on any grid, and all
analytic bounds (transfer row sums, sojourn bounds) hold exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RowSumViolation, UndefinedCDF
from .model import ActionDistribution, TransitionRateModel, _on_ages

DEFAULT_SURVIVAL_FLOOR = 1e-10
DEFAULT_ROW_SUM_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class AgeGrid:
    """Strictly increasing age nodes ``0 = y_0 < ... < y_K = y_max`` with
    trapezoidal quadrature weights."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError("grid must start at age 0")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, y_max: float, n_cells: int) -> "AgeGrid":
        if y_max <= 0 or n_cells < 1:
            raise ValueError("need y_max > 0 and n_cells >= 1")
        return cls(np.linspace(0.0, float(y_max), int(n_cells) + 1))

    @classmethod
    def for_model(cls, model: TransitionRateModel, n_cells: int = 1000,
                  survival_floor: float = DEFAULT_SURVIVAL_FLOOR) -> "AgeGrid":
        """Uniform grid whose horizon keeps the sojourn survival below
        ``survival_floor`` at the truncation age."""
        y_max = math.log(1.0 / survival_floor) / model.m
        return cls.uniform(y_max, n_cells)

    @property
    def y_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def n_cells(self) -> int:
        return self.nodes.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights; integrate piecewise-linear node data exactly."""
        h = self.steps
        w = np.zeros_like(self.nodes)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        return w

    def cell_of(self, y: float) -> int:
        """Left-closed cell index of age ``y``; ``n_cells`` means the frozen tail."""
        k = int(np.searchsorted(self.nodes, y, side="right")) - 1
        return min(max(k, 0), self.n_cells)


@dataclass(frozen=True, eq=False)
class AgePolicy:
    """Per-state age-dependent randomized action choice.

    ``weights[i, k]`` is the action distribution used on the age cell
    ``[y_k, y_{k+1})``; the last node's distribution also rules the frozen
    tail beyond ``y_max`` (piecewise-constant, left-closed semantics).
    """

    grid: AgeGrid
    weights: np.ndarray  # (n_states, n_nodes, n_actions)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 3 or w.shape[1] != self.grid.nodes.size:
            raise ValueError("weights must be (n_states, n_nodes, n_actions)")
        if np.any(w < 0.0):
            raise ValueError("negative action weight")
        if np.max(np.abs(w.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("action weights must sum to 1 per node within 1e-12")
        object.__setattr__(self, "weights", w)

    @classmethod
    def deterministic(cls, grid: AgeGrid, action_idx: np.ndarray,
                      n_actions: int) -> "AgePolicy":
        idx = np.asarray(action_idx, dtype=int)
        if idx.ndim != 2 or idx.shape[1] != grid.nodes.size:
            raise ValueError("action_idx must be (n_states, n_nodes)")
        w = np.zeros(idx.shape + (n_actions,))
        rows = np.arange(idx.shape[0])[:, None]
        cols = np.arange(idx.shape[1])[None, :]
        w[rows, cols, idx] = 1.0
        return cls(grid, w)

    @classmethod
    def constant(cls, grid: AgeGrid, n_states: int, n_actions: int,
                 action_index: int | np.ndarray = 0) -> "AgePolicy":
        """Age-blind policy: the same action (per state) at every age."""
        idx = np.broadcast_to(np.asarray(action_index, dtype=int), (n_states,))
        full = np.repeat(idx[:, None], grid.nodes.size, axis=1)
        return cls.deterministic(grid, full, n_actions)

    @property
    def n_states(self) -> int:
        return self.weights.shape[0]

    @property
    def n_actions(self) -> int:
        return self.weights.shape[2]

    def dist_at(self, i: int, y: float) -> np.ndarray:
        return self.weights[i, self.grid.cell_of(y)]

    def action_indices(self) -> np.ndarray | None:
        """Per-node argmax actions if every node is a point mass, else None."""
        idx = np.argmax(self.weights, axis=2)
        rows = np.arange(self.weights.shape[0])[:, None]
        cols = np.arange(self.weights.shape[1])[None, :]
        if np.all(self.weights[rows, cols, idx] == 1.0):
            return idx
        return None


@dataclass(frozen=True, eq=False)
class CellTables:
    """Cell-averaged coefficients for one state; the last row is the frozen
    tail evaluated at ``y_max``."""

    lam: np.ndarray   # (n_cells + 1, n_actions, n_states)
    Lam: np.ndarray   # (n_cells + 1, n_actions)
    cost: np.ndarray  # (n_cells + 1, n_actions)


def cell_tables(model: TransitionRateModel, i: int, grid: AgeGrid) -> CellTables:
    y = grid.nodes
    nS, nU, K = model.n_states, model.n_actions, grid.n_cells
    lam_nodes = np.zeros((nU, nS, K + 1))
    cost_nodes = np.zeros((nU, K + 1))
    for ui, u in enumerate(model.actions):
        for j in model.states:
            if j == i:
                continue
            lam_nodes[ui, j] = _on_ages(lambda yy: model.rate(i, j, yy, u), y)
        cost_nodes[ui] = _on_ages(lambda yy: model.cost(i, yy, u), y)
    lam = np.concatenate(
        [0.5 * (lam_nodes[:, :, :-1] + lam_nodes[:, :, 1:]), lam_nodes[:, :, -1:]],
        axis=2).transpose(2, 0, 1).copy()
    cost = np.concatenate(
        [0.5 * (cost_nodes[:, :-1] + cost_nodes[:, 1:]), cost_nodes[:, -1:]],
        axis=1).T.copy()
    Lam = lam.sum(axis=2)
    return CellTables(lam=lam, Lam=Lam, cost=cost)


def _stage_weights(Lam_cells, Lam_tail, grid: AgeGrid, alpha: float):
    """Per-cell masses ``S_k e^{-alpha y_k} (1 - e^{-(alpha+Lam)h})/(alpha+Lam)``
    plus the closed-form tail weight; also returns the node survival curve."""
    h = grid.steps
    K = grid.n_cells
    H = np.concatenate(([0.0], np.cumsum(Lam_cells * h)))
    S = np.exp(-H)
    aL = alpha + Lam_cells
    with np.errstate(divide="ignore", invalid="ignore"):
        g1 = np.where(aL > 0.0, -np.expm1(-aL * h) / np.where(aL > 0.0, aL, 1.0), h)
    if alpha != 0.0:
        w = S[:K] * np.exp(-alpha * grid.nodes[:K]) * g1
        tail_den = alpha + Lam_tail
    else:
        w = S[:K] * g1
        tail_den = Lam_tail
    if tail_den <= 0.0:
        raise RowSumViolation(
            "total exit rate vanishes at the grid horizon; the sojourn need "
            "not be finite (lower rate bound violated)")
    w_tail = S[K] * math.exp(-alpha * grid.y_max) / tail_den
    return w, w_tail, S


def _row_weights(model: TransitionRateModel, grid: AgeGrid, r_i) -> np.ndarray:
    """Normalize an age-to-action map to node weights (n_nodes, n_actions)."""
    nU = model.n_actions
    n_nodes = grid.nodes.size
    if isinstance(r_i, (int, np.integer)):
        w = np.zeros((n_nodes, nU))
        w[:, int(r_i)] = 1.0
        return w
    if isinstance(r_i, ActionDistribution):
        if len(r_i) != nU:
            raise ValueError("distribution length does not match the action grid")
        return np.tile(r_i.weights, (n_nodes, 1))
    if callable(r_i):
        w = np.zeros((n_nodes, nU))
        for k, y in enumerate(grid.nodes):
            dist = r_i(float(y))
            w[k] = dist.weights if isinstance(dist, ActionDistribution) else dist
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("callable policy row returned an invalid distribution")
        return w
    w = np.asarray(r_i, dtype=float)
    if w.shape != (n_nodes, nU):
        raise ValueError(f"policy row must be ({n_nodes}, {nU}), got {w.shape}")
    return w


def _relax(tables: CellTables, node_weights: np.ndarray):
    """Relaxed per-cell coefficients; total exit rate is the float sum of the
    per-target rates so the embedded row sums telescope exactly."""
    lam_rel = np.einsum("ku,kus->ks", node_weights, tables.lam)
    cost_rel = np.einsum("ku,ku->k", node_weights, tables.cost)
    Lam_rel = lam_rel.sum(axis=1)
    return lam_rel, Lam_rel, cost_rel


def survival_curve(model: TransitionRateModel, i: int, r_i, grid: AgeGrid) -> np.ndarray:
    """Probability of no jump before each grid node, ``exp(-H(y_k))`` with
    ``H`` the trapezoidal cumulative integral of the relaxed exit rate."""
    tables = cell_tables(model, i, grid)
    lam_rel, Lam_rel, _ = _relax(tables, _row_weights(model, grid, r_i))
    _, _, S = _stage_weights(Lam_rel[:-1], Lam_rel[-1], grid, 0.0)
    return S


def one_stage_cost(model: TransitionRateModel, i: int, r_i, grid: AgeGrid,
                   alpha: float) -> float:
    """Expected discounted cost accrued until the first jump out of ``i``.

    ``alpha = 0`` gives the undiscounted jump-to-jump cost used by the
    average-cost problem.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    tables = cell_tables(model, i, grid)
    lam_rel, Lam_rel, cost_rel = _relax(tables, _row_weights(model, grid, r_i))
    w, w_tail, _ = _stage_weights(Lam_rel[:-1], Lam_rel[-1], grid, alpha)
    return float(w @ cost_rel[:-1] + w_tail * cost_rel[-1])


def transition_prob(model: TransitionRateModel, i: int, r_i, grid: AgeGrid,
                    row_sum_tol: float = DEFAULT_ROW_SUM_TOL) -> np.ndarray:
    """Embedded jump probabilities out of ``i``; the row sums to one."""
    tables = cell_tables(model, i, grid)
    lam_rel, Lam_rel, _ = _relax(tables, _row_weights(model, grid, r_i))
    w, w_tail, _ = _stage_weights(Lam_rel[:-1], Lam_rel[-1], grid, 0.0)
    p = w @ lam_rel[:-1] + w_tail * lam_rel[-1]
    s = float(p.sum())
    if abs(s - 1.0) > row_sum_tol:
        raise RowSumViolation(
            f"state {i}: embedded row sums to {s!r} (grid too coarse or the "
            "lower rate bound is violated)")
    return p


def sojourn_cdf(model: TransitionRateModel, i: int, j: int, r_i,
                grid: AgeGrid) -> np.ndarray:
    """Conditional sojourn CDF given the next state is ``j``, on the grid
    nodes.  Undefined (raises) when the embedded probability vanishes."""
    tables = cell_tables(model, i, grid)
    lam_rel, Lam_rel, _ = _relax(tables, _row_weights(model, grid, r_i))
    w, w_tail, _ = _stage_weights(Lam_rel[:-1], Lam_rel[-1], grid, 0.0)
    mass = w * lam_rel[:-1, j]
    p = float(mass.sum() + w_tail * lam_rel[-1, j])
    if p <= 0.0:
        raise UndefinedCDF(f"embedded probability of {i} -> {j} is zero")
    return np.concatenate(([0.0], np.cumsum(mass))) / p


def expected_sojourn(model: TransitionRateModel, i: int, r_i, grid: AgeGrid) -> float:
    """Mean time to the first jump out of ``i``; lies in ``[1/M, 1/m]``."""
    tables = cell_tables(model, i, grid)
    lam_rel, Lam_rel, _ = _relax(tables, _row_weights(model, grid, r_i))
    w, w_tail, _ = _stage_weights(Lam_rel[:-1], Lam_rel[-1], grid, 0.0)
    return float(w.sum() + w_tail)


def discounted_transfer(model: TransitionRateModel, i: int, r_i, grid: AgeGrid,
                        alpha: float) -> np.ndarray:
    """Per-target expected discount factor at the jump epoch,
    ``p_hat_ij E[e^{-alpha tau} | j]`` computed directly (no CDF division)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    tables = cell_tables(model, i, grid)
    lam_rel, Lam_rel, _ = _relax(tables, _row_weights(model, grid, r_i))
    w, w_tail, _ = _stage_weights(Lam_rel[:-1], Lam_rel[-1], grid, alpha)
    return w @ lam_rel[:-1] + w_tail * lam_rel[-1]


@dataclass(frozen=True, eq=False)
class EmbeddedSMDP:
    """All per-state reduction tables under one policy.

    ``p_cells[i, k, j]`` is the probability mass of jumping to ``j`` from
    the age cell ``k`` (last row: frozen tail); column cumsums give the
    conditional sojourn CDFs.
    """

    grid: AgeGrid
    alpha: float
    survival: np.ndarray  # (n_states, n_nodes)
    f: np.ndarray         # (n_states,)
    p_hat: np.ndarray     # (n_states, n_states)
    D: np.ndarray         # (n_states, n_states)
    tau_bar: np.ndarray   # (n_states,)
    p_cells: np.ndarray   # (n_states, n_cells + 1, n_states)

    def sojourn_cdf(self, i: int, j: int) -> np.ndarray:
        p = float(self.p_hat[i, j])
        if p <= 0.0:
            raise UndefinedCDF(f"embedded probability of {i} -> {j} is zero")
        mass = self.p_cells[i, :-1, j]
        return np.concatenate(([0.0], np.cumsum(mass))) / p


def embed(model: TransitionRateModel, policy: AgePolicy, grid: AgeGrid,
          alpha: float, row_sum_tol: float = DEFAULT_ROW_SUM_TOL) -> EmbeddedSMDP:
    """Assemble the full reduction under ``policy``.

    ``alpha = 0`` makes the transfer matrix coincide with the embedded
    transition matrix and ``f`` the undiscounted jump-to-jump cost.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if policy.n_states != model.n_states or policy.n_actions != model.n_actions:
        raise ValueError("policy shape does not match the model")
    if not np.array_equal(policy.grid.nodes, grid.nodes):
        raise ValueError("policy grid does not match the requested grid")
    nS, K = model.n_states, grid.n_cells
    survival = np.zeros((nS, K + 1))
    f = np.zeros(nS)
    p_hat = np.zeros((nS, nS))
    D = np.zeros((nS, nS))
    tau_bar = np.zeros(nS)
    p_cells = np.zeros((nS, K + 1, nS))
    for i in range(nS):
        tables = cell_tables(model, i, grid)
        lam_rel, Lam_rel, cost_rel = _relax(tables, policy.weights[i])
        w0, w0_tail, S = _stage_weights(Lam_rel[:K], Lam_rel[K], grid, 0.0)
        survival[i] = S
        p_cells[i, :K] = w0[:, None] * lam_rel[:K]
        p_cells[i, K] = w0_tail * lam_rel[K]
        p_hat[i] = p_cells[i].sum(axis=0)
        tau_bar[i] = w0.sum() + w0_tail
        s = float(p_hat[i].sum())
        if abs(s - 1.0) > row_sum_tol:
            raise RowSumViolation(
                f"state {i}: embedded row sums to {s!r} (grid too coarse or "
                "the lower rate bound is violated)")
        if alpha == 0.0:
            f[i] = w0 @ cost_rel[:K] + w0_tail * cost_rel[K]
            D[i] = p_hat[i]
        else:
            w, w_tail, _ = _stage_weights(Lam_rel[:K], Lam_rel[K], grid, alpha)
            f[i] = w @ cost_rel[:K] + w_tail * cost_rel[K]
            D[i] = w @ lam_rel[:K] + w_tail * lam_rel[K]
    return EmbeddedSMDP(grid=grid, alpha=alpha, survival=survival, f=f,
                        p_hat=p_hat, D=D, tau_bar=tau_bar, p_cells=p_cells)
