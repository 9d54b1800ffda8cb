"""Lipschitz constants of the value functions and a-priori error bounds.

Upper bounds from the underlying inequalities are used as working values
throughout (the bounds only ever need upper estimates).
"""

import math
from dataclasses import dataclass

import numpy as np

from .validation import check_fraction

__all__ = [
    "DerivedConstants",
    "LipschitzLedger",
    "BoundReport",
    "derive_constants",
    "flow_factor_constants",
    "time_lipschitz_constant",
    "lipschitz_ledger",
    "value_error_bound",
    "stopping_bound",
    "delta_norms",
    "compute_bounds",
    "ETA_CLAMP",
]

# infeasible stages evaluate the eta-dependent term at this fraction of min delta
ETA_CLAMP = 1.0 - 1e-6


@dataclass(frozen=True)
class DerivedConstants:
    """Operator Lipschitz factors ``E1..E6``."""

    E1: float
    E2: float
    E3: float
    E4: float
    E5: float
    E6: float

    def as_dict(self):
        return {f"E{i}": getattr(self, f"E{i}") for i in range(1, 7)}


def derive_constants(mc):
    """Evaluate ``E1..E6`` from the model constants."""
    Cl, ll, Ct, lt, lq = mc.C_lambda, mc.lip_lambda, mc.C_tstar, mc.lip_tstar, mc.lip_Q
    Cg, g1, g2 = mc.C_g, mc.lip_g_1, mc.lip_g_2
    E1 = Cl * lt + Ct * ll * (1.0 + Ct * Cl)
    E2 = Ct * Cl * lq
    E3 = g1 + g2 * lt + Cg * (Ct * ll + Cl * lt)
    E4 = 2.0 * Cl * lt + Ct * ll * (2.0 + Ct * Cl)
    E5 = E1 + Cl * lt
    E6 = E3 + (g2 + Cg * Cl) * lt
    return DerivedConstants(E1, E2, E3, E4, E5, E6)


def flow_factor_constants(mc, C_h, lip_h_1, lip_h_2, lip_h_star, case="mixed"):
    """Constants ``(D1, D2)`` bounding the variation of ``h(flow(x, t)) e^{-Lambda(x, t)}``.

    ``case`` is ``"interior"`` (both times before exit), ``"boundary"`` (both at
    exit) or ``"mixed"``.
    """
    Cl, ll, Ct, lt = mc.C_lambda, mc.lip_lambda, mc.C_tstar, mc.lip_tstar
    if case == "interior":
        return lip_h_1 + C_h * Ct * ll, lip_h_2 + C_h * Cl
    if case == "boundary":
        return lip_h_star + C_h * Ct * ll + C_h * Cl * lt, 0.0
    if case == "mixed":
        return lip_h_1 + C_h * Ct * ll + lip_h_2 * lt + C_h * Cl * lt, lip_h_2 + C_h * Cl
    raise ValueError("case must be 'interior', 'boundary' or 'mixed'")


def time_lipschitz_constant(mc, C_w):
    """Lipschitz constant in time of the stop-or-jump operator for a bound ``C_w``."""
    return C_w * mc.C_lambda + mc.lip_g_2 + mc.C_g * mc.C_lambda


@dataclass(eq=False)
class LipschitzLedger:
    """Per-stage Lipschitz constants of ``v_0..v_N``."""

    lip1: np.ndarray
    lip2: np.ndarray
    lipstar: np.ndarray
    lip: np.ndarray

    @property
    def N(self):
        return len(self.lip) - 1

    def rows(self):
        return [
            {"n": n, "lip1": float(a), "lip2": float(b), "lipstar": float(c), "lip": float(d)}
            for n, (a, b, c, d) in enumerate(zip(self.lip1, self.lip2, self.lipstar, self.lip))
        ]


def lipschitz_ledger(mc, dc, N):
    """Backward recursion for the Lipschitz constants, seeded at ``N`` by the reward."""
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    Cl, ll, Ct, lt, lq = mc.C_lambda, mc.lip_lambda, mc.C_tstar, mc.lip_tstar, mc.lip_Q
    Cg, g1, g2 = mc.C_g, mc.lip_g_1, mc.lip_g_2
    growth = math.exp(Cl * Ct)
    lip1 = np.empty(N + 1)
    lip2 = np.empty(N + 1)
    lipstar = np.empty(N + 1)
    lip = np.empty(N + 1)
    lip1[N], lip2[N], lipstar[N], lip[N] = g1, g2, mc.lip_g_star, mc.reward_lipschitz
    for n in range(N - 1, -1, -1):
        lip1[n] = growth * (
            2.0 * lip1[n + 1] * dc.E2 + Cg * dc.E1 + Cg * dc.E4 + Cg * Ct * ll * (1.0 + Cl * Ct)
        ) + growth * max(g1 + g2 * lt, lipstar[n + 1] * lq)
        lip2[n] = growth * (Cg * Cl * (4.0 + Cl * Ct) + g2)
        lipstar[n] = lip1[n] + lip2[n] * lt
        lip[n] = lip1[n + 1] * dc.E2 + Cg * dc.E5 + max(dc.E6, lipstar[n + 1] * lq + Cg * Ct * ll)
    return LipschitzLedger(lip1, lip2, lipstar, lip)


def _error_arrays(errors, N):
    e_Z = np.asarray(errors["e_Z"], dtype=float)
    e_S = np.asarray(errors["e_S"], dtype=float)
    if len(e_Z) != N + 1 or len(e_S) != N + 1:
        raise ValueError(f"error table must cover stages 0..{N}")
    return e_Z, e_S


def _stage_array(values, N, name):
    arr = np.broadcast_to(np.asarray(values, dtype=float), (N,)).copy()
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    return arr


def _eta_term(C_g, C_lambda, inner, min_deltas):
    """Optimized ``2 C_g (2 C_lambda eta + inner / eta)`` with admissibility flags.

    The unconstrained optimum ``eta = (inner / (2 C_lambda))^{1/2}`` is used
    when it lies below ``min_deltas``; otherwise ``eta`` is clamped just below
    the minimum step and the stage is flagged.
    """
    eta = np.sqrt(inner / (2.0 * C_lambda))
    feasible = eta < min_deltas
    eta_used = np.where(feasible, eta, min_deltas * ETA_CLAMP)
    term = np.where(
        feasible,
        4.0 * C_g * np.sqrt(2.0 * C_lambda * inner),
        2.0 * C_g * (2.0 * C_lambda * eta_used + np.divide(inner, eta_used, out=np.full_like(inner, np.inf), where=eta_used > 0)),
    )
    # zero inner with zero step: nothing to bound
    term = np.where(inner == 0, 0.0, term)
    return eta, eta_used, feasible, term


@dataclass(eq=False)
class BoundReport:
    """Bounds on ``|V_0 - V_hat_0|`` (``b2``) and ``|V_0 - V_bar_0|`` (``b3``)."""

    constants: DerivedConstants
    ledger: LipschitzLedger
    b2_increments: np.ndarray = None
    b2_terminal: float = None
    b2_partials: np.ndarray = None
    eta: np.ndarray = None
    eta_used: np.ndarray = None
    b2_feasible: np.ndarray = None
    b3_per_stage: np.ndarray = None
    b3_partials: np.ndarray = None
    beta_over_a: np.ndarray = None
    b3_feasible: np.ndarray = None
    a: float = None
    inputs: dict = None

    @property
    def B2(self):
        return float(self.b2_partials[0])

    @property
    def B3(self):
        return None if self.b3_partials is None else float(self.b3_partials[0])

    @property
    def certified(self):
        ok = bool(np.all(self.b2_feasible))
        if self.b3_feasible is not None:
            ok = ok and bool(np.all(self.b3_feasible))
        return ok

    def to_dict(self):
        def lst(a):
            return None if a is None else [float(x) for x in np.asarray(a)]

        doc = {
            "constants": self.constants.as_dict(),
            "ledger": self.ledger.rows(),
            "b2": {
                "per_stage": lst(self.b2_increments),
                "terminal": float(self.b2_terminal),
                "partials": lst(self.b2_partials),
                "total": self.B2,
                "eta": lst(self.eta),
                "eta_used": lst(self.eta_used),
                "feasible": [bool(f) for f in self.b2_feasible],
                "certified": bool(np.all(self.b2_feasible)),
            },
        }
        if self.b3_partials is not None:
            doc["b3"] = {
                "per_stage": lst(self.b3_per_stage),
                "partials": lst(self.b3_partials),
                "total": self.B3,
                "a": self.a,
                "beta_over_a": lst(self.beta_over_a),
                "feasible": [bool(f) for f in self.b3_feasible],
                "certified": bool(np.all(self.b3_feasible)),
            }
        if self.inputs is not None:
            doc["inputs"] = self.inputs
        return doc


def value_error_bound(ledger, mc, dc, errors, delta_norms, min_deltas):
    """Telescoped bound on ``|V_n - V_hat_n|`` for every stage.

    Per stage ``n < N`` the increment is::

        alpha |Delta|_n + beta_n e_Z(n) + 2 [v_{n+1}] e_Z(n+1)
            + gamma ([t*] e_Z(n) + e_S(n+1))^{1/2}

    and the terminal term is ``[g] e_Z(N)``.
    """
    N = ledger.N
    e_Z, e_S = _error_arrays(errors, N)
    dn = _stage_array(delta_norms, N, "delta_norms")
    md = _stage_array(min_deltas, N, "min_deltas")
    Cg, Cl, lt, lq = mc.C_g, mc.C_lambda, mc.lip_tstar, mc.lip_Q
    alpha = mc.lip_g_2 + 2.0 * Cg * Cl
    n = np.arange(N)
    beta_n = (
        ledger.lip[n]
        + ledger.lip1[n + 1] * dc.E2
        + Cg * dc.E4
        + np.maximum(mc.lip_g_1 + mc.lip_g_2 * lt, ledger.lipstar[n + 1] * lq)
    )
    inner = lt * e_Z[:-1] + e_S[1:]
    eta, eta_used, feasible, root = _eta_term(Cg, Cl, inner, md)
    inc = alpha * dn + beta_n * e_Z[:-1] + 2.0 * ledger.lip[n + 1] * e_Z[1:] + root
    terminal = mc.reward_lipschitz * e_Z[N]
    partials = np.empty(N + 1)
    partials[N] = terminal
    for k in range(N - 1, -1, -1):
        partials[k] = partials[k + 1] + inc[k]
    return BoundReport(
        constants=dc,
        ledger=ledger,
        b2_increments=inc,
        b2_terminal=float(terminal),
        b2_partials=partials,
        eta=eta,
        eta_used=eta_used,
        b2_feasible=feasible,
    )


def stopping_bound(ledger, mc, dc, errors, b2_partials, a, min_deltas, report=None):
    """Recursive bound on ``|V_n - V_bar_n|`` for the constructed stopping rule.

    Fills the stopping part of ``report`` (a new report is created when
    omitted) and returns it.
    """
    a = check_fraction(a)
    N = ledger.N
    e_Z, e_S = _error_arrays(errors, N)
    md = _stage_array(min_deltas, N, "min_deltas")
    b2 = np.asarray(b2_partials, dtype=float)
    if len(b2) != N + 1:
        raise ValueError(f"b2_partials must cover stages 0..{N}")
    Cg, Cl, Ct, ll, lt, lq = mc.C_g, mc.C_lambda, mc.C_tstar, mc.lip_lambda, mc.lip_tstar, mc.lip_Q
    n = np.arange(N)
    a_n = (
        2.0 * ledger.lip1[n + 1] * dc.E2
        + 2.0 * Cg * Ct * ll * (2.0 + Ct * Cl)
        + np.maximum(4.0 * Cg * Cl * lt + 2.0 * ledger.lipstar[n + 1] * lq, 3.0 * mc.lip_g_1)
    )
    inner = lt / (1.0 - a) * e_Z[:-1] + e_S[1:]
    beta_over_a, _, feasible, root = _eta_term(Cg, Cl, inner, md)
    per_stage = np.empty(N)
    per_stage[N - 1] = b2[N - 1] + 3.0 * mc.reward_lipschitz * e_Z[N] + a_n[N - 1] * e_Z[N - 1] + root[N - 1]
    for k in range(N - 2, -1, -1):
        per_stage[k] = b2[k + 1] + b2[k] + 2.0 * ledger.lip[k + 1] * e_Z[k + 1] + a_n[k] * e_Z[k] + root[k]
    partials = np.cumsum(per_stage[::-1])[::-1]
    if report is None:
        report = BoundReport(constants=dc, ledger=ledger)
    report.b3_per_stage = per_stage
    report.b3_partials = partials
    report.beta_over_a = beta_over_a
    report.b3_feasible = feasible
    report.a = a
    return report


def delta_norms(model, gridset, delta_request, p=None):
    """Per-stage ``L^p`` norm of the clipped step under the grid weights, and its minimum.

    Returns ``(norms, min_deltas)`` for stages ``0..N-1``; the minimum is over
    reachable classes.
    """
    p = gridset.p if p is None else float(p)
    N = gridset.N
    norms = np.empty(N)
    mins = np.empty(N)
    for n in range(N):
        grid = gridset.grids[n]
        req = float(delta_request) if np.ndim(delta_request) == 0 else float(np.asarray(delta_request)[n])
        tstar = np.asarray(model.exit_time(grid.codebook[:, :-1]), dtype=float)
        step = np.minimum(req, tstar / 2.0)
        w = np.asarray(grid.weights, dtype=float)
        norms[n] = float(np.sum(w * step**p) ** (1.0 / p)) if math.isfinite(p) else float(step[w > 0].max())
        reach = gridset.reachable(n)[grid.z_class]
        mins[n] = float(step[reach].min()) if np.any(reach) else math.inf
    return norms, mins


def compute_bounds(model, gridset, delta_request, a=0.5, errors=None):
    """Both bounds from a solved grid set, echoing every input."""
    mc = model.constants
    dc = derive_constants(mc)
    errors = gridset.errors if errors is None else errors
    if not errors:
        raise ValueError("grid set carries no error table")
    ledger = lipschitz_ledger(mc, dc, gridset.N)
    norms, mins = delta_norms(model, gridset, delta_request)
    report = value_error_bound(ledger, mc, dc, errors, norms, mins)
    stopping_bound(ledger, mc, dc, errors, report.b2_partials, a, mins, report)
    report.inputs = {
        "model_constants": mc.as_dict(),
        "errors": {
            k: ([float(x) for x in v] if isinstance(v, (list, tuple, np.ndarray)) else v)
            for k, v in errors.items()
        },
        "delta_norms": [float(x) for x in norms],
        "min_deltas": [float(x) for x in mins],
        "a": float(a),
    }
    return report
