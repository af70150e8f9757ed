"""Discounted-cost solver.

The minimization over age-to-action maps is carried out by a backward
sweep along the age axis: once the post-jump values are fixed, the
minimand is pointwise in the action, so a cell-by-cell backward pass with
an exponential-integrator update (exact for the cell-frozen coefficients
of the reduction) realizes the exact minimum over all piecewise-constant
maps.  The outer fixed point alternates sweeps with exact evaluations of
the greedy policy, which keeps the iteration count small even for tiny
discount rates; the returned value is certified by the contraction
a-posteriori bound.  A brute-force enumerator over coarse policy spaces
serves as an independent oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergentSweep, MaxIterExceeded, TooLarge
from .model import TransitionRateModel
from .reduction import AgeGrid, AgePolicy, cell_tables, embed

BRUTE_FORCE_POLICY_CAP = 10 ** 6


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Backward age sweep output for one state."""

    value: float            # extended value at age 0
    actions: np.ndarray     # argmin action index per age node (last = tail)
    q: np.ndarray           # extended value per age node


@dataclass(frozen=True, eq=False)
class DiscountedSolution:
    V: np.ndarray           # value per state
    phi: np.ndarray         # extended value per (state, age node)
    policy: AgePolicy
    residual: float         # final sup-norm Bellman step
    iterations: int
    alpha: float
    history: list = field(default_factory=list)  # (iteration, residual)


class DiscountedSolver:
    """Cached per-cell coefficient tables plus sweep and evaluation kernels.

    With ``alpha = 0`` the same kernels drive the average-cost machinery
    (relative values with a gain subtracted per unit time); contraction
    then comes from the problem structure, not from discounting.
    """

    def __init__(self, model: TransitionRateModel, grid: AgeGrid, alpha: float):
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.model = model
        self.grid = grid
        self.alpha = float(alpha)
        nS, nU, K = model.n_states, model.n_actions, grid.n_cells
        h = grid.steps
        self.A = np.zeros((nS, K, nU))
        self.g1 = np.zeros((nS, K, nU))
        self.cbar = np.zeros((nS, K + 1, nU))
        self.den_tail = np.zeros((nS, nU))
        # per-state support-compressed rate tables: (K + 1, nU, |support|)
        self.lam: list = []
        self.support: list = []
        for i in range(nS):
            t = cell_tables(model, i, grid)
            sup = np.flatnonzero(t.lam.max(axis=(0, 1)) > 0.0)
            self.support.append(sup)
            self.lam.append(np.ascontiguousarray(t.lam[:, :, sup]))
            aL = alpha + t.Lam[:K]
            self.A[i] = np.exp(-aL * h[:, None])
            with np.errstate(divide="ignore", invalid="ignore"):
                self.g1[i] = np.where(
                    aL > 0.0, -np.expm1(-aL * h[:, None]) / np.where(aL > 0.0, aL, 1.0),
                    h[:, None])
            self.cbar[i] = t.cost
            self.den_tail[i] = alpha + t.Lam[K]
        if np.any(self.den_tail <= 0.0) and alpha == 0.0:
            raise ValueError("total exit rate vanishes at the horizon for some "
                             "action; lower rate bound violated")

    @property
    def kappa(self) -> float:
        return self.model.M / (self.model.M + self.alpha)

    def _transfer_w(self, W: np.ndarray) -> np.ndarray:
        """Continuation term sum_j lam_ij(cell, u) W_j, shape (nS, K+1, nU)."""
        out = np.empty((len(self.lam),) + self.lam[0].shape[:2])
        for i, (lam_i, sup) in enumerate(zip(self.lam, self.support)):
            out[i] = lam_i @ W[sup]
        return out

    def sweep(self, W: np.ndarray, rho: float = 0.0):
        """Backward minimizing pass; returns (values at age 0, argmin action
        per node, full value curves)."""
        W = np.asarray(W, dtype=float)
        nS, K, nU = self.A.shape
        LW = self._transfer_w(W)
        G = (self.cbar[:, :K] - rho + LW[:, :K]) * self.g1
        q = np.empty((nS, K + 1))
        actions = np.empty((nS, K + 1), dtype=int)
        tail = (self.cbar[:, K] - rho + LW[:, K]) / self.den_tail
        actions[:, K] = np.argmin(tail, axis=1)
        q[:, K] = np.take_along_axis(tail, actions[:, K][:, None], axis=1)[:, 0]
        for k in range(K - 1, -1, -1):
            cand = self.A[:, k] * q[:, k + 1][:, None] + G[:, k]
            actions[:, k] = np.argmin(cand, axis=1)
            q[:, k] = np.take_along_axis(cand, actions[:, k][:, None], axis=1)[:, 0]
        limit = 2.0 * ((self.model.C_tilde + abs(rho)) / max(self.alpha, self.model.m)
                       + float(np.max(np.abs(W))))
        if not np.all(np.isfinite(q)) or float(np.max(np.abs(q))) > limit:
            raise DivergentSweep(
                f"sweep values exceed {limit!r}; inputs violate the declared bounds")
        return q[:, 0].copy(), actions, q

    def rows_tables(self, actions: np.ndarray, with_tau: bool = False):
        """One-stage cost and transfer rows of the deterministic policy given
        by per-node action indices; ``with_tau`` additionally returns the
        stage-weight totals (the expected sojourn when ``alpha == 0``)."""
        nS, K, nU = self.A.shape
        f = np.zeros(nS)
        D = np.zeros((nS, nS))
        tau = np.zeros(nS)
        cells = np.arange(K)
        for i in range(nS):
            sel = actions[i]
            Asel = self.A[i, cells, sel[:K]]
            g1sel = self.g1[i, cells, sel[:K]]
            csel = self.cbar[i, cells, sel[:K]]
            lam_i = self.lam[i]
            lamsel = lam_i[np.arange(K + 1), sel, :]
            P = np.concatenate(([1.0], np.cumprod(Asel)))
            wc = P[:K] * g1sel
            den = self.den_tail[i, sel[K]]
            f[i] = wc @ csel + P[K] * self.cbar[i, K, sel[K]] / den
            D[i, self.support[i]] = wc @ lamsel[:K] + P[K] * lamsel[K] / den
            if with_tau:
                tau[i] = wc.sum() + P[K] / den
        if with_tau:
            return f, D, tau
        return f, D

    def greedy_value(self, actions: np.ndarray) -> np.ndarray:
        """Exact value of the deterministic policy (fixed point of its own
        affine operator)."""
        f, D = self.rows_tables(actions)
        return np.linalg.solve(np.eye(len(f)) - D, f)

    def solve(self, tol: float, max_iter: int) -> DiscountedSolution:
        if self.alpha <= 0:
            raise ValueError("discounted solve needs alpha > 0")
        if tol <= 0:
            raise ValueError("tol must be positive")
        kappa = self.kappa
        # stop when the Bellman step certifies ||V - V*|| <= tol
        step_tol = tol * (1.0 - kappa) / kappa
        J = np.zeros(self.model.n_states)
        prev_actions = None
        history = []
        for it in range(1, max_iter + 1):
            TJ, actions, q = self.sweep(J)
            resid = float(np.max(np.abs(TJ - J)))
            history.append((it, resid))
            if resid <= step_tol:
                policy = AgePolicy.deterministic(self.grid, actions,
                                                 self.model.n_actions)
                return DiscountedSolution(V=TJ, phi=q, policy=policy,
                                          residual=resid, iterations=it,
                                          alpha=self.alpha, history=history)
            if prev_actions is not None and np.array_equal(actions, prev_actions):
                # greedy policy is its own improvement; the residual is float
                # noise that the contraction bound cannot certify further
                raise MaxIterExceeded(
                    f"policy stable but residual {resid!r} cannot certify "
                    f"tolerance {tol!r}")
            J = self.greedy_value(actions)
            prev_actions = actions
        raise MaxIterExceeded(f"no convergence within {max_iter} iterations")


def inner_age_sweep(model: TransitionRateModel, i: int, W, grid: AgeGrid,
                    alpha: float, rho: float = 0.0) -> SweepResult:
    """Backward age sweep for one state given post-jump values ``W``.

    Solves the terminal-value problem from the frozen-rate stationary value
    at ``y_max`` down to age 0 with pointwise minimization over the action
    grid (ties go to the lowest action index).  Use ``alpha > 0, rho = 0``
    for discounting, ``alpha = 0`` with ``rho`` a candidate gain for the
    average problem, and both zero for plain evaluation.
    """
    if alpha > 0.0 and rho != 0.0:
        raise ValueError("use either a discount rate or a gain, not both")
    solver = DiscountedSolver(model, grid, alpha)
    q0, actions, q = solver.sweep(np.asarray(W, dtype=float), rho=rho)
    return SweepResult(value=float(q0[i]), actions=actions[i], q=q[i])


def bellman(model: TransitionRateModel, W, grid: AgeGrid, alpha: float):
    """One application of the minimizing jump-to-jump operator.

    Returns the updated values and the greedy action indices per (state,
    age node).  Monotone in ``W`` and a sup-norm contraction with modulus
    at most ``M / (M + alpha)``.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    solver = DiscountedSolver(model, grid, alpha)
    TW, actions, _ = solver.sweep(np.asarray(W, dtype=float))
    return TW, actions


def value_iteration(model: TransitionRateModel, grid: AgeGrid, alpha: float,
                    tol: float = 1e-8, max_iter: int = 500) -> DiscountedSolution:
    """Fixed point of the minimizing operator, certified within ``tol``.

    Starts from the zero function and alternates minimizing sweeps with
    exact greedy-policy evaluations; terminates when the Bellman step
    passes the contraction a-posteriori test, so the returned values are
    within ``tol`` of the discrete optimum in sup norm.
    """
    return DiscountedSolver(model, grid, alpha).solve(tol, max_iter)


def policy_value(model: TransitionRateModel, policy: AgePolicy, grid: AgeGrid,
                 alpha: float) -> np.ndarray:
    """Exact discounted value of a fixed (possibly randomized) policy via
    the embedded tables: the unique solution of J = f + D J."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    emb = embed(model, policy, grid, alpha)
    return np.linalg.solve(np.eye(model.n_states) - emb.D, emb.f)


def brute_force_value(model: TransitionRateModel, grid: AgeGrid, alpha: float):
    """Enumerate every deterministic piecewise-constant policy on a coarse
    grid and return the pointwise minimum of their values plus an argmin
    policy.  Independent oracle for the solver; deliberately small."""
    nS, nU = model.n_states, model.n_actions
    n_nodes = grid.nodes.size
    if nS > 4 or nU > 3 or grid.n_cells > 3:
        raise TooLarge("brute force is limited to |S| <= 4, |U| <= 3 and "
                       "at most 3 age cells")
    n_policies = nU ** (n_nodes * nS)
    if n_policies > BRUTE_FORCE_POLICY_CAP:
        raise TooLarge(f"{n_policies} policies exceed the enumeration cap")
    rows = list(itertools.product(range(nU), repeat=n_nodes))
    best_v = np.full(nS, np.inf)
    best_policy = None
    best_total = math.inf
    for assignment in itertools.product(rows, repeat=nS):
        policy = AgePolicy.deterministic(grid, np.asarray(assignment), nU)
        v = policy_value(model, policy, grid, alpha)
        best_v = np.minimum(best_v, v)
        total = float(v.sum())
        if total < best_total:
            best_total = total
            best_policy = policy
    return best_v, best_policy


@dataclass(frozen=True, eq=False)
class AgeBlindSolution:
    V: np.ndarray
    policy: AgePolicy
    action_index: np.ndarray  # chosen action per state
    residual: float
    iterations: int


def solve_age_blind(model: TransitionRateModel, grid: AgeGrid, alpha: float,
                    tol: float = 1e-8, max_iter: int = 500) -> AgeBlindSolution:
    """Best policy measurable in the state only (constant in age).

    Restricting every state to a single age cell turns the problem into a
    finite-action jump-chain fixed point; solved by policy iteration on
    the same discretization as the unrestricted solver.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    solver = DiscountedSolver(model, grid, alpha)
    nS, nU = model.n_states, model.n_actions
    n_nodes = grid.nodes.size
    f_u = np.zeros((nU, nS))
    D_u = np.zeros((nU, nS, nS))
    for u in range(nU):
        const = np.full((nS, n_nodes), u, dtype=int)
        f_u[u], D_u[u] = solver.rows_tables(const)
    pi = np.argmin(f_u, axis=0)
    kappa = solver.kappa
    step_tol = tol * (1.0 - kappa) / kappa
    J = np.zeros(nS)
    for it in range(1, max_iter + 1):
        Q = f_u.T + np.einsum("uij,j->iu", D_u, J)
        TJ = Q.min(axis=1)
        resid = float(np.max(np.abs(TJ - J)))
        if resid <= step_tol:
            pi = np.argmin(Q, axis=1)
            policy = AgePolicy.constant(grid, nS, nU, pi)
            return AgeBlindSolution(V=TJ, policy=policy, action_index=pi,
                                    residual=resid, iterations=it)
        pi = np.argmin(Q, axis=1)
        idx = np.arange(nS)
        J = np.linalg.solve(np.eye(nS) - D_u[pi, idx, :], f_u[pi, idx])
    raise MaxIterExceeded(f"no convergence within {max_iter} iterations")
