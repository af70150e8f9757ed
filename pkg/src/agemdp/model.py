"""Age-dependent controlled transition-rate models.

A model is a finite ordered state set, a finite grid of action points,
transition rate functions ``rate(i, j, y, u)`` of the age ``y`` since the
last jump, a running cost rate ``cost(i, y, u)``, and declared uniform
bounds: ``M`` (upper) and ``m`` (lower) on the total exit rate and
``C_tilde`` on the cost rate.  Rate and cost callables must accept a float
or a 1-d array of ages and broadcast over it.

Models are immutable after construction and all operations here are pure,
so instances can be shared freely across threads.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ModelSpecError

BUILTIN_NAMES = ("const2", "age_pure", "queueing", "shock", "shock_modified")

# Cap on recorded violations per assumption id; totals are always exact.
_MAX_RECORDED = 100


class ActionDistribution:
    """Probability weights over the model's action grid."""

    __slots__ = ("weights",)

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("action weights must be one-dimensional")
        if w.size == 0:
            raise ValueError("empty action distribution")
        if np.any(w < 0.0):
            raise ValueError("negative action weight")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("action weights must sum to 1 within 1e-12")
        self.weights = w

    @classmethod
    def point_mass(cls, index: int, n_actions: int) -> "ActionDistribution":
        w = np.zeros(n_actions)
        w[index] = 1.0
        return cls(w)

    def __len__(self) -> int:
        return int(self.weights.size)

    def __repr__(self) -> str:  # pragma: no cover
        return f"ActionDistribution({self.weights.tolist()})"


@dataclass(frozen=True, eq=False)
class TransitionRateModel:
    """Finite controlled jump model with age-dependent rates.

    ``rate(i, j, y, u)`` is the jump intensity from ``i`` to ``j != i`` at
    age ``y`` under action point ``u``; ``cost(i, y, u)`` is the running
    cost rate.  ``doc`` holds the canonical JSON document when the model
    was built from one (used for serialization round trips).
    """

    states: tuple
    actions: tuple
    rate: Callable
    cost: Callable
    M: float
    m: float
    C_tilde: float
    name: str = "custom"
    doc: dict | None = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def action_dim(self) -> int:
        return len(self.actions[0])


@dataclass
class ValidationReport:
    """Outcome of machine-checking the model assumptions on a sample grid."""

    passes: bool
    violations: list
    counts: dict = field(default_factory=dict)
    delta: float | None = None
    renewal_state: int | None = None
    rate_range: tuple | None = None


def _on_ages(fn, y: np.ndarray) -> np.ndarray:
    """Evaluate a rate/cost callable on an age array, broadcasting scalars."""
    out = np.asarray(fn(y), dtype=float)
    if out.shape != y.shape:
        out = np.broadcast_to(out, y.shape).copy()
    return out


def total_rate(model: TransitionRateModel, i, y, u):
    """Total exit rate from ``i`` at age ``y`` under ``u`` (equals the
    negated diagonal rate)."""
    tot = None
    for j in model.states:
        if j == i:
            continue
        r = model.rate(i, j, y, u)
        tot = r if tot is None else tot + r
    return tot


def relaxed_rate(model: TransitionRateModel, i, j, y, nu: ActionDistribution):
    """Rate from ``i`` to ``j`` with the action drawn from ``nu``.

    Linear in ``nu``: a point mass reproduces ``rate`` exactly.
    """
    if len(nu) != model.n_actions:
        raise ValueError("distribution length does not match the action grid")
    out = 0.0
    for w, u in zip(nu.weights, model.actions):
        if w != 0.0:
            out = out + w * model.rate(i, j, y, u)
    return out


def relaxed_cost(model: TransitionRateModel, i, y, nu: ActionDistribution):
    """Cost rate in ``i`` with the action drawn from ``nu``."""
    if len(nu) != model.n_actions:
        raise ValueError("distribution length does not match the action grid")
    out = 0.0
    for w, u in zip(nu.weights, model.actions):
        if w != 0.0:
            out = out + w * model.cost(i, y, u)
    return out


def validate_model(model: TransitionRateModel, age_samples, check_A6: bool = False,
                   tol: float = 1e-9) -> ValidationReport:
    """Check the declared bounds on the product grid states x ages x actions.

    Verifies rate nonnegativity, ``m <= total exit rate <= M`` and
    ``0 <= cost <= C_tilde`` at every sampled point.  With ``check_A6`` it
    additionally searches for a state reachable in one jump from every
    other state at a uniformly positive rate (trying every relabeling) and
    checks, per ordered pair, that a rate positive somewhere on the sample
    grid is positive everywhere on it.  Violations are data, not errors.
    """
    y = np.asarray(age_samples, dtype=float)
    if y.size == 0:
        raise ValueError("age_samples must be nonempty")
    violations: list = []
    counts: dict = {}

    def record(kind, loc, value):
        counts[kind] = counts.get(kind, 0) + 1
        if counts[kind] <= _MAX_RECORDED:
            violations.append((kind, loc, float(value)))

    slack = tol * max(1.0, model.M)
    tot_min, tot_max = math.inf, -math.inf
    # min over samples of rate(i, j, ., .) and max, per ordered pair
    pair_min: dict = {}
    pair_max: dict = {}
    for i in model.states:
        for u in model.actions:
            tot = np.zeros_like(y)
            for j in model.states:
                if j == i:
                    continue
                r = _on_ages(lambda yy: model.rate(i, j, yy, u), y)
                bad = r < -slack
                if np.any(bad):
                    k = int(np.argmax(bad))
                    record("nonneg", (i, j, float(y[k]), u), r[k])
                key = (i, j)
                pair_min[key] = min(pair_min.get(key, math.inf), float(r.min()))
                pair_max[key] = max(pair_max.get(key, -math.inf), float(r.max()))
                tot += r
            tot_min = min(tot_min, float(tot.min()))
            tot_max = max(tot_max, float(tot.max()))
            hi = tot > model.M + slack
            if np.any(hi):
                k = int(np.argmax(hi))
                record("A1", (i, float(y[k]), u), tot[k])
            lo = tot < model.m - slack
            if np.any(lo):
                k = int(np.argmax(lo))
                record("A2", (i, float(y[k]), u), tot[k])
            c = _on_ages(lambda yy: model.cost(i, yy, u), y)
            bad = (c < -slack) | (c > model.C_tilde + slack)
            if np.any(bad):
                k = int(np.argmax(bad))
                record("A4", (i, float(y[k]), u), c[k])

    delta = None
    renewal = None
    if check_A6:
        best_s, best_delta = None, 0.0
        for s in model.states:
            d = min(pair_min[(i, s)] for i in model.states if i != s)
            if d > best_delta:
                best_s, best_delta = s, d
        if best_s is None:
            worst = min(model.states, key=lambda s: min(
                pair_min[(i, s)] for i in model.states if i != s))
            record("A6", ("no renewal state", worst), 0.0)
        else:
            delta, renewal = best_delta, best_s
            for (i, j), mx in pair_max.items():
                if j == best_s:
                    continue
                if mx > slack and pair_min[(i, j)] <= slack:
                    record("A6", (i, j), pair_min[(i, j)])
            if counts.get("A6"):
                # sup/inf condition failed; the relabeling alone is not enough
                renewal = None

    return ValidationReport(
        passes=not violations,
        violations=violations,
        counts=counts,
        delta=delta,
        renewal_state=renewal,
        rate_range=(tot_min, tot_max),
    )


# ---------------------------------------------------------------------------
# builders


def _require(cond, msg):
    if not cond:
        raise ModelSpecError(msg)


def _num(params, key, default):
    v = params.get(key, default)
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ModelSpecError(f"parameter {key!r} must be a number, got {v!r}")


def _int(params, key, default):
    v = params.get(key, default)
    if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
        raise ModelSpecError(f"parameter {key!r} must be an integer, got {v!r}")
    return int(v)


def _action_grid(doc_actions) -> tuple:
    """Materialize the action grid from ``{"dims": [...]}`` or ``{"list": [...]}``."""
    if "list" in doc_actions:
        pts = [tuple(float(x) for x in a) for a in doc_actions["list"]]
        _require(len(pts) > 0, "empty action list")
        dim = len(pts[0])
        _require(all(len(p) == dim for p in pts), "inconsistent action dimensions")
        return tuple(pts)
    if "dims" in doc_actions:
        axes = []
        for d in doc_actions["dims"]:
            lo, hi, n = float(d["lo"]), float(d["hi"]), int(d["n"])
            _require(n >= 1, "action grid must have at least one point per dimension")
            _require(hi >= lo, f"action bounds out of order: {lo} > {hi}")
            _require(n > 1 or hi == lo, "n=1 requires lo == hi")
            axes.append(np.linspace(lo, hi, n))
        return tuple(tuple(float(x) for x in pt) for pt in itertools.product(*axes))
    raise ModelSpecError("actions must provide 'dims' or 'list'")


def _linear_age_cost(b_hold, b_slope, b_ycap):
    """Holding cost i * b_hold * (1 + b_slope * min(y, b_ycap))."""
    def b(i, y):
        y = np.asarray(y, dtype=float)
        return b_hold * i * (1.0 + b_slope * np.minimum(y, b_ycap))
    return b


def _table_lookup(age_knots, values, action_index):
    knots = np.asarray(age_knots, dtype=float)

    def lookup(key, y, u):
        tbl = values.get(key)
        if tbl is None:
            return np.zeros_like(np.asarray(y, dtype=float))
        col = tbl[:, action_index[u]]
        return np.interp(np.asarray(y, dtype=float), knots, col)

    return lookup


def _normalize_table(section, n_knots, n_actions, what):
    values = {}
    for key, rows in section["values"].items():
        arr = np.asarray(rows, dtype=float)
        _require(arr.shape == (n_knots, n_actions),
                 f"{what} table {key!r} must be {n_knots} x {n_actions}, got {arr.shape}")
        values[key] = arr
    return values


def _build_const2(doc):
    def rate(i, j, y, u):
        y = np.asarray(y, dtype=float)
        if (i, j) in ((0, 1), (1, 0)):
            return np.ones_like(y)
        return np.zeros_like(y)

    def cost(i, y, u):
        return np.full_like(np.asarray(y, dtype=float), float(i))

    return rate, cost


def _build_age_pure(doc):
    cap = float(doc["rates"]["builtin"]["cap"])

    def rate(i, j, y, u):
        y = np.asarray(y, dtype=float)
        if (i, j) == (0, 1):
            return 1.0 + np.minimum(y, cap)
        if (i, j) == (1, 0):
            return np.ones_like(y)
        return np.zeros_like(y)

    def cost(i, y, u):
        return np.full_like(np.asarray(y, dtype=float), float(i))

    return rate, cost


def _build_queueing(doc):
    capacity = int(doc["rates"]["builtin"]["capacity"])

    def rate(i, j, y, u):
        y = np.asarray(y, dtype=float)
        gamma, mu = u
        if j == i + 1 and i < capacity:
            return np.full_like(y, gamma)
        if j == i - 1 and i >= 1:
            return np.full_like(y, mu)
        return np.zeros_like(y)

    return rate, _shock_family_cost(doc, income=True)


def _shock_family_cost(doc, income=False):
    p = doc["cost"]["builtin"]
    b = _linear_age_cost(p["b_hold"], p["b_slope"], p["b_ycap"])
    b1 = p["b1_coef"]
    b2 = p.get("b2_coef", 0.0)

    if income:
        # queueing: holding cost minus arrival income plus service cost
        def cost(i, y, u):
            gamma, mu = u
            return b(i, y) - b1 * gamma + b2 * mu
        return cost

    def cost(i, y, u):
        return b(i, y) + b1 * u[0]
    return cost


def _build_shock(doc):
    N = int(doc["rates"]["builtin"]["N"])

    def rate(i, j, y, u):
        y = np.asarray(y, dtype=float)
        mu = u[0]
        if i <= N - 2:
            if j == i + 1:
                return mu / (1.0 + y)
            if j == i + 2:
                return mu * y / (1.0 + y)
        elif i == N - 1:
            if j == N:
                return np.full_like(y, mu)
        elif i == N:
            if j == 0:
                return np.full_like(y, mu)
        return np.zeros_like(y)

    return rate, _shock_family_cost(doc)


def _build_shock_modified(doc):
    p = doc["rates"]["builtin"]
    N = int(p["N"])
    ramp = (float(p["ramp_lo"]), float(p["ramp_hi"]))

    def _interp(y, lo_val, hi_val):
        return np.interp(np.asarray(y, dtype=float), ramp, [lo_val, hi_val])

    def rate(i, j, y, u):
        y = np.asarray(y, dtype=float)
        mu = u[0]
        if i <= N - 3:
            base = mu / 10.0 ** (N - i)
            if j == N:
                return np.full_like(y, base)
            if j == i + 1:
                return _interp(y, mu - 2.0 * base, base)
            if j == i + 2:
                return mu - base - _interp(y, mu - 2.0 * base, base)
        elif i == N - 2:
            lo, hi = mu - 2.0 * mu / 100.0, 2.0 * mu / 100.0
            if j == N - 1:
                return _interp(y, lo, hi)
            if j == N:
                return mu - _interp(y, lo, hi)
        elif i == N - 1:
            if j == N:
                return np.full_like(y, mu)
        elif i == N:
            if j == 0:
                return np.full_like(y, mu)
        return np.zeros_like(y)

    return rate, _shock_family_cost(doc)


def _build_table(doc):
    actions = _action_grid(doc["actions"])
    action_index = {u: k for k, u in enumerate(actions)}
    rt = doc["rates"]["table"]
    ct = doc["cost"]["table"]
    rate_values = {tuple(int(x) for x in key.split(",")): np.asarray(v, dtype=float)
                   for key, v in rt["values"].items()}
    cost_values = {int(key): np.asarray(v, dtype=float)
                   for key, v in ct["values"].items()}
    rknots = np.asarray(rt["age_knots"], dtype=float)
    cknots = np.asarray(ct["age_knots"], dtype=float)

    def rate(i, j, y, u):
        y = np.asarray(y, dtype=float)
        tbl = rate_values.get((i, j))
        if tbl is None:
            return np.zeros_like(y)
        return np.interp(y, rknots, tbl[:, action_index[u]])

    def cost(i, y, u):
        y = np.asarray(y, dtype=float)
        tbl = cost_values.get(i)
        if tbl is None:
            return np.zeros_like(y)
        return np.interp(y, cknots, tbl[:, action_index[u]])

    return rate, cost


_RATE_BUILDERS = {
    "const2": _build_const2,
    "age_pure": _build_age_pure,
    "queueing": _build_queueing,
    "shock": _build_shock,
    "shock_modified": _build_shock_modified,
    "table": _build_table,
}


def _cost_param_defaults(params, income=False):
    out = {
        "b_hold": _num(params, "b_hold", 1.0),
        "b_slope": _num(params, "b_slope", 0.0),
        "b_ycap": _num(params, "b_ycap", 5.0),
        "b1_coef": _num(params, "b1_coef", 0.0),
    }
    if income:
        out["b2_coef"] = _num(params, "b2_coef", 0.0)
    _require(out["b_hold"] >= 0, "b_hold must be nonnegative")
    _require(out["b_slope"] >= 0, "b_slope must be nonnegative")
    _require(out["b_ycap"] >= 0, "b_ycap must be nonnegative")
    _require(out["b1_coef"] >= 0, "b1_coef must be nonnegative")
    return out


_PARAM_KEYS = {
    "const2": set(),
    "age_pure": {"cap"},
    "queueing": {"capacity", "gamma1", "gamma2", "mu1", "mu2", "n_gamma", "n_mu",
                 "b_hold", "b_slope", "b_ycap", "b1_coef", "b2_coef"},
    "shock": {"N", "mu1", "mu2", "n_mu", "b_hold", "b_slope", "b_ycap", "b1_coef"},
    "shock_modified": {"N", "mu1", "mu2", "n_mu", "ramp_lo", "ramp_hi",
                       "b_hold", "b_slope", "b_ycap", "b1_coef"},
}


def build_builtin(name: str, params: dict | None = None) -> TransitionRateModel:
    """Build one of the named example models.

    ``const2`` and ``age_pure`` are two-state micro-models used throughout
    the test suite; ``queueing`` is a capacity-truncated service system
    with controllable arrival and service rates; ``shock`` and
    ``shock_modified`` are cyclic machine-degradation models driven by a
    controllable shock rate.
    """
    params = dict(params or {})
    if name not in _PARAM_KEYS:
        raise ModelSpecError(f"unknown builtin model {name!r}; "
                             f"expected one of {', '.join(BUILTIN_NAMES)}")
    unknown = set(params) - _PARAM_KEYS[name]
    _require(not unknown, f"unknown parameters for {name!r}: {sorted(unknown)}")

    if name == "const2":
        doc = {
            "type": "const2",
            "states": [0, 1],
            "actions": {"list": [[0.0]]},
            "rates": {"builtin": {}},
            "cost": {"builtin": {}},
            "bounds": {"M": 1.0, "m": 1.0, "C_tilde": 1.0},
        }
    elif name == "age_pure":
        cap = _num(params, "cap", 50.0)
        _require(cap > 0, "cap must be positive")
        doc = {
            "type": "age_pure",
            "states": [0, 1],
            "actions": {"list": [[0.0]]},
            "rates": {"builtin": {"cap": cap}},
            "cost": {"builtin": {}},
            "bounds": {"M": 1.0 + cap, "m": 1.0, "C_tilde": 1.0},
        }
    elif name == "queueing":
        capacity = _int(params, "capacity", 20)
        g1, g2 = _num(params, "gamma1", 0.5), _num(params, "gamma2", 1.5)
        m1, m2 = _num(params, "mu1", 1.0), _num(params, "mu2", 3.0)
        ng, nm = _int(params, "n_gamma", 9), _int(params, "n_mu", 9)
        _require(capacity >= 1, "capacity must be >= 1")
        _require(0 < g1 <= g2, f"need 0 < gamma1 <= gamma2, got {g1}, {g2}")
        _require(0 < m1 <= m2, f"need 0 < mu1 <= mu2, got {m1}, {m2}")
        cost = _cost_param_defaults(params, income=True)
        _require(cost["b2_coef"] * m1 >= cost["b1_coef"] * g2,
                 "income rate can exceed cost rate: need b2_coef*mu1 >= b1_coef*gamma2")
        c_max = (cost["b_hold"] * capacity * (1.0 + cost["b_slope"] * cost["b_ycap"])
                 - cost["b1_coef"] * g1 + cost["b2_coef"] * m2)
        doc = {
            "type": "queueing",
            "states": list(range(capacity + 1)),
            "actions": {"dims": [{"lo": g1, "hi": g2, "n": ng},
                                 {"lo": m1, "hi": m2, "n": nm}]},
            "rates": {"builtin": {"capacity": capacity, "gamma1": g1, "gamma2": g2,
                                  "mu1": m1, "mu2": m2, "n_gamma": ng, "n_mu": nm}},
            "cost": {"builtin": cost},
            "bounds": {"M": g2 + m2, "m": min(g1, m1), "C_tilde": c_max},
        }
    elif name in ("shock", "shock_modified"):
        N = _int(params, "N", 5)
        m1, m2 = _num(params, "mu1", 0.5), _num(params, "mu2", 2.0)
        nm = _int(params, "n_mu", 9)
        _require(0 < m1 <= m2, f"need 0 < mu1 <= mu2, got {m1}, {m2}")
        cost = _cost_param_defaults(params)
        c_max = (cost["b_hold"] * N * (1.0 + cost["b_slope"] * cost["b_ycap"])
                 + cost["b1_coef"] * m2)
        rates: dict = {"N": N, "mu1": m1, "mu2": m2, "n_mu": nm}
        if name == "shock":
            _require(N >= 2, "shock needs N >= 2")
        else:
            _require(N >= 3, "shock_modified needs N >= 3")
            lo = _num(params, "ramp_lo", 100.0)
            hi = _num(params, "ramp_hi", 1000.0)
            _require(0 < lo < hi, f"need 0 < ramp_lo < ramp_hi, got {lo}, {hi}")
            rates.update(ramp_lo=lo, ramp_hi=hi)
        doc = {
            "type": name,
            "states": list(range(N + 1)),
            "actions": {"dims": [{"lo": m1, "hi": m2, "n": nm}]},
            "rates": {"builtin": rates},
            "cost": {"builtin": cost},
            "bounds": {"M": m2, "m": m1, "C_tilde": c_max},
        }
    return _finalize_doc(doc)


def _finalize_doc(doc: dict) -> TransitionRateModel:
    """Construct a model from a canonical (already validated) document."""
    rate, cost = _RATE_BUILDERS[doc["type"]](doc)
    b = doc["bounds"]
    return TransitionRateModel(
        states=tuple(int(s) for s in doc["states"]),
        actions=_action_grid(doc["actions"]),
        rate=rate,
        cost=cost,
        M=float(b["M"]),
        m=float(b["m"]),
        C_tilde=float(b["C_tilde"]),
        name=doc["type"],
        doc=doc,
    )


def model_from_json(doc: dict) -> TransitionRateModel:
    """Build a model from its JSON document.

    The document is normalized first, so parse -> serialize -> parse is
    value-identical.  See ``model_to_json``.
    """
    if not isinstance(doc, dict) or "type" not in doc:
        raise ModelSpecError("model document must be an object with a 'type' field")
    kind = doc["type"]
    if kind not in _RATE_BUILDERS:
        raise ModelSpecError(f"unknown model type {kind!r}")
    doc = copy.deepcopy(doc)

    for key in ("states", "actions", "rates", "cost", "bounds"):
        if key not in doc:
            if kind == "table":
                raise ModelSpecError(f"table model document is missing {key!r}")
            # builtin documents may omit derived sections; rebuild them
            params = dict(doc.get("rates", {}).get("builtin", {}))
            params.update(doc.get("cost", {}).get("builtin", {}))
            return build_builtin(kind, params)

    states = tuple(int(s) for s in doc["states"])
    _require(states == tuple(range(len(states))),
             "states must be the contiguous indices 0..N")
    actions = _action_grid(doc["actions"])
    bounds = doc["bounds"]
    try:
        M, m, C = float(bounds["M"]), float(bounds["m"]), float(bounds["C_tilde"])
    except (KeyError, TypeError, ValueError):
        raise ModelSpecError("bounds must provide numeric M, m and C_tilde")
    _require(0 < m <= M, f"need 0 < m <= M, got m={m}, M={M}")
    _require(C >= 0, "C_tilde must be nonnegative")

    if kind == "table":
        rt, ct = doc["rates"].get("table"), doc["cost"].get("table")
        _require(rt is not None and ct is not None,
                 "table model needs rates.table and cost.table sections")
        for section, what in ((rt, "rate"), (ct, "cost")):
            _require("age_knots" in section and "values" in section,
                     f"{what} table needs 'age_knots' and 'values'")
            knots = np.asarray(section["age_knots"], dtype=float)
            _require(knots.ndim == 1 and knots.size >= 1 and np.all(np.diff(knots) > 0),
                     f"{what} age_knots must be strictly increasing")
            _normalize_table(section, knots.size, len(actions), what)
        for key in rt["values"]:
            parts = key.split(",")
            _require(len(parts) == 2, f"rate table key {key!r} must be 'i,j'")
            i, j = int(parts[0]), int(parts[1])
            _require(i in states and j in states and i != j,
                     f"rate table key {key!r} out of range")
        return _finalize_doc(doc)
    else:
        # builtin documents are fully derived from their parameter sections;
        # rebuild and require any explicitly given derived fields to agree
        params = dict(doc["rates"].get("builtin", {}))
        params.update(doc["cost"].get("builtin", {}))
        rebuilt = build_builtin(kind, params)
        for key in ("states", "actions", "bounds"):
            _require(doc[key] == rebuilt.doc[key],
                     f"{key!r} section is inconsistent with the builtin parameters")
        return rebuilt


def model_to_json(model: TransitionRateModel) -> dict:
    """Canonical JSON document for a model built from one."""
    if model.doc is None:
        raise ModelSpecError("model was not built from a document")
    return copy.deepcopy(model.doc)
