"""Long-run average-cost solvers.

Two routes to the optimal gain and bias:

* ``vanishing_discount`` follows a decreasing discount sequence and reads
  the gain off ``alpha * V_alpha(0)`` and the bias off the centered
  discounted values, with per-step diagnostics (including a hitting-time
  envelope certifying that the centered values stay bounded).
* ``renewal_bisection`` exploits one-jump reachability of a renewal state:
  for a candidate gain the stopped problem (renewal state absorbing at
  value zero) prices a cycle; the cycle criterion is nonincreasing in the
  gain and its root is the optimal gain.

Both return a gain/bias pair whose optimality-equation residual is
reported (and checked) rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import A6Missing, BisectionBracketFailure, MaxIterExceeded, NotConverging
from .model import TransitionRateModel, validate_model
from .reduction import AgeGrid, AgePolicy, embed
from .discounted import DiscountedSolver, value_iteration

DEFAULT_ALPHA_SEQ = tuple(0.2 / 2 ** k for k in range(10))


@dataclass(frozen=True, eq=False)
class AlphaDiagnostic:
    alpha: float
    alpha_v0: float        # alpha * V_alpha(0)
    max_abs_h: float       # sup_i |V_alpha(i) - V_alpha(0)|
    envelope: float        # hitting-time bound times the cost bound (inf if none)


@dataclass(frozen=True, eq=False)
class BisectionStep:
    g: float
    phi: float             # cycle criterion at g


@dataclass(frozen=True, eq=False)
class AverageSolution:
    g: float               # optimal gain, cost per unit time
    h: np.ndarray          # bias, anchored at h[0] = 0
    policy: AgePolicy
    residual: float        # sup-norm optimality-equation residual
    method: str
    diagnostics: list = field(default_factory=list)   # AlphaDiagnostic records
    trace: list = field(default_factory=list)         # BisectionStep records
    renewal_state: int | None = None


def acoe_residual(model: TransitionRateModel, grid: AgeGrid, g: float, h) -> float:
    """Sup-norm residual of the average-cost optimality equation at (g, h).

    The bias is re-anchored at state 0 first; the residual is invariant
    under that shift.
    """
    h = np.asarray(h, dtype=float)
    if h.shape != (model.n_states,):
        raise ValueError("h must have one entry per state")
    W = h - h[0]
    solver = DiscountedSolver(model, grid, 0.0)
    rhs, _, _ = solver.sweep(W, rho=float(g))
    return float(np.max(np.abs(rhs - W)))


def _hitting_times(model, grid, policy, taboo: int) -> np.ndarray:
    """Expected time to first enter ``taboo`` from each state under a fixed
    policy, via the embedded chain (inf where unreachable)."""
    emb = embed(model, policy, grid, 0.0)
    P = emb.p_hat.copy()
    P[:, taboo] = 0.0
    try:
        t = np.linalg.solve(np.eye(model.n_states) - P, emb.tau_bar)
    except np.linalg.LinAlgError:
        return np.full(model.n_states, np.inf)
    if np.any(t < 0):
        return np.full(model.n_states, np.inf)
    return t


def vanishing_discount(model: TransitionRateModel, grid: AgeGrid,
                       alpha_seq=None, tol: float = 1e-3,
                       solver_tol: float | None = None,
                       max_iter: int = 500) -> AverageSolution:
    """Average-cost solution as the small-discount limit.

    Runs the discounted solver along ``alpha_seq`` (decreasing; default ten
    halvings from 0.2), records ``alpha * V_alpha(0)`` and the centered
    value spread per step, and returns the last iterate.  Raises
    ``NotConverging`` when the final two gain estimates differ by more
    than ``tol`` (the sequence is reported, not asserted, to be Cauchy).
    """
    seq = list(DEFAULT_ALPHA_SEQ if alpha_seq is None else alpha_seq)
    if not seq or any(a <= 0 for a in seq):
        raise ValueError("alpha_seq must contain positive discount rates")
    if any(b >= a for a, b in zip(seq, seq[1:])):
        raise ValueError("alpha_seq must be decreasing")
    vi_tol = solver_tol if solver_tol is not None else tol / 4.0
    diagnostics = []
    gains = []
    sol = None
    for a in seq:
        sol = value_iteration(model, grid, a, tol=vi_tol, max_iter=max_iter)
        h_a = sol.V - sol.V[0]
        t = _hitting_times(model, grid, sol.policy, taboo=0)
        diagnostics.append(AlphaDiagnostic(
            alpha=a,
            alpha_v0=float(a * sol.V[0]),
            max_abs_h=float(np.max(np.abs(h_a))),
            envelope=float(np.max(t) * model.C_tilde),
        ))
        gains.append(diagnostics[-1].alpha_v0)
    if len(gains) >= 2 and abs(gains[-1] - gains[-2]) > tol:
        raise NotConverging(
            f"alpha*V(0) gap {abs(gains[-1] - gains[-2])!r} exceeds {tol!r} "
            f"at the end of the discount sequence")
    g = gains[-1]
    h = sol.V - sol.V[0]
    return AverageSolution(
        g=float(g), h=h, policy=sol.policy,
        residual=acoe_residual(model, grid, g, h),
        method="vanishing_discount", diagnostics=diagnostics,
    )


def _stopped_values(solver: DiscountedSolver, s0: int, g: float,
                    stop_tol: float, max_iter: int):
    """Minimal expected (cost - g * time) until first entry to ``s0``.

    Value iteration on the stopped problem (``s0`` absorbing at value 0)
    accelerated by exact greedy evaluations on the taboo chain.
    """
    nS = solver.model.n_states
    keep = np.arange(nS) != s0
    W = np.zeros(nS)
    actions = None
    for _ in range(max_iter):
        TW, actions, _ = solver.sweep(W, rho=g)
        TW = TW.copy()
        TW[s0] = 0.0
        if float(np.max(np.abs((TW - W)[keep]))) <= stop_tol:
            return TW, actions
        f, D, tau = solver.rows_tables(actions, with_tau=True)
        rhs = f - g * tau
        Dt = D[np.ix_(keep, keep)]
        W = np.zeros(nS)
        try:
            W[keep] = np.linalg.solve(np.eye(nS - 1) - Dt, rhs[keep])
        except np.linalg.LinAlgError:
            W = TW  # fall back to the plain sweep iterate
    raise MaxIterExceeded("stopped-problem iteration did not converge")


def renewal_bisection(model: TransitionRateModel, grid: AgeGrid,
                      g_lo: float = 0.0, g_hi: float | None = None,
                      tol: float = 1e-4, renewal_state: int | None = None,
                      max_iter: int = 10_000) -> AverageSolution:
    """Average-cost solution via regeneration at a renewal state.

    Requires a state reachable in one jump from every other state at a
    uniformly positive rate (checked on the grid nodes; raises
    ``A6Missing`` otherwise).  For a candidate gain ``g`` the stopped
    problem prices the cost-minus-``g``-time to the renewal state; the
    cycle criterion at the renewal state is nonincreasing in ``g`` and is
    bisected to ``|criterion| <= tol``.
    """
    samples = grid.nodes if grid.nodes.size <= 256 else grid.nodes[
        np.linspace(0, grid.nodes.size - 1, 256).astype(int)]
    report = validate_model(model, samples, check_A6=True)
    if report.renewal_state is None or not report.delta:
        raise A6Missing("no state is reachable in one jump from every other "
                        "state at a positive rate")
    s0 = report.renewal_state if renewal_state is None else renewal_state
    delta = report.delta
    if g_hi is None:
        g_hi = model.C_tilde
    if g_hi <= g_lo:
        raise ValueError("need g_lo < g_hi")
    solver = DiscountedSolver(model, grid, 0.0)
    # per-cycle reach probability is at least delta/M, giving geometric
    # convergence of the stopped iteration at that rate
    stop_tol = max(tol * delta / model.M, 1e-14)

    def criterion(g: float):
        psi, actions = _stopped_values(solver, s0, g, stop_tol, max_iter)
        rhs, acts_all, _ = solver.sweep(psi, rho=g)
        return float(rhs[s0]), psi, acts_all

    trace = []
    phi_lo, psi, acts = criterion(g_lo)
    trace.append(BisectionStep(g=g_lo, phi=phi_lo))
    if phi_lo < -max(10.0 * tol, 1e-9):
        raise BisectionBracketFailure(
            f"cycle criterion is {phi_lo!r} at g = {g_lo!r}; it must be "
            "nonnegative for nonnegative costs")
    g, phi_g = g_lo, phi_lo
    if abs(phi_lo) > tol:
        phi_hi, psi, acts = criterion(g_hi)
        trace.append(BisectionStep(g=g_hi, phi=phi_hi))
        if phi_hi > max(10.0 * tol, 1e-9):
            raise BisectionBracketFailure(
                f"cycle criterion is positive at the upper bracket g = {g_hi!r}")
        lo, hi = g_lo, g_hi
        g, phi_g = g_hi, phi_hi
        for _ in range(200):
            if abs(phi_g) <= tol:
                break
            mid = 0.5 * (lo + hi)
            phi_mid, psi, acts = criterion(mid)
            trace.append(BisectionStep(g=mid, phi=phi_mid))
            g, phi_g = mid, phi_mid
            if phi_mid > 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-15 * max(1.0, model.C_tilde):
                break
    h = psi - psi[0]
    policy = AgePolicy.deterministic(grid, acts, model.n_actions)
    return AverageSolution(
        g=float(g), h=h, policy=policy,
        residual=acoe_residual(model, grid, g, h),
        method="renewal_bisection", trace=trace, renewal_state=int(s0),
    )
