"""Quantized backward dynamic programming and a continuous-recursion oracle.

The quantized operators read only the estimated transition rows: for a
stage-``k - 1`` z-class with row ``pi`` over the stage-``k`` codebook points
``(z'_j, s'_j)``::

    J_hat(s) = sum_j pi_j * (w(z'_j) if s'_j < s else g(flow(z, s)))
    K_hat    = sum_j pi_j * w(z'_j)
    L_hat    = max(max_{s in G(z)} J_hat(s), K_hat)
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .exceptions import AbsentRowError, UnsupportedModelError
from .model import as_states, cumulative_hazard

__all__ = [
    "TimeGrid",
    "StageValues",
    "ValueTable",
    "OracleResult",
    "build_time_grid",
    "j_hat",
    "k_hat",
    "op_J_hat",
    "op_K_hat",
    "op_L_hat",
    "backward_solve",
    "continuous_oracle",
    "write_oracle_csv",
]

# values closer than this (relative) are treated as equal in max/argmax decisions
TIE_RTOL = 1e-12


def _tie_tol(x):
    return TIE_RTOL * np.maximum(1.0, np.abs(x))


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``0, delta, ..., n * delta`` strictly inside ``[0, tstar)``."""

    z: tuple
    tstar: float
    delta: float
    n: int
    clipped: bool

    @property
    def nodes(self):
        return np.arange(self.n + 1) * self.delta


def _grid_sizes(tstar, delta_request):
    delta = np.minimum(delta_request, tstar / 2.0)
    n = np.maximum(np.floor(tstar / delta).astype(np.int64) - 1, 0)
    return delta, n, delta < delta_request


def build_time_grid(z, tstar, delta_request):
    """Path-adapted grid with step ``min(delta_request, tstar / 2)``.

    ``n = int(tstar / delta) - 1`` so that the last node is at most
    ``tstar - delta``.
    """
    tstar = float(tstar)
    delta_request = float(delta_request)
    if not tstar > 0:
        raise ValueError("tstar must be > 0")
    if not delta_request > 0:
        raise ValueError("delta_request must be > 0")
    delta, n, clipped = _grid_sizes(np.float64(tstar), np.float64(delta_request))
    return TimeGrid(tuple(np.atleast_1d(np.asarray(z, dtype=float)).tolist()), tstar, float(delta), int(n), bool(clipped))


def j_hat(row, s_next, w_next, g_stop, s):
    """Quantized stop-or-jump value for one transition row.

    ``g_stop`` is ``g(flow(z, s))`` and broadcasts with ``s``.
    """
    row = np.asarray(row, dtype=float)
    s = np.asarray(s, dtype=float)
    jumped = np.asarray(s_next)[None, :] < np.atleast_1d(s)[:, None]
    cont = (jumped * (row * np.asarray(w_next))[None, :]).sum(axis=1)
    stay = (~jumped * row[None, :]).sum(axis=1)
    out = cont + np.atleast_1d(g_stop) * stay
    return out.reshape(s.shape)


def k_hat(row, w_next):
    """Quantized continuation value ``sum_j pi_j w(z'_j)``."""
    return float(np.dot(np.asarray(row, dtype=float), np.asarray(w_next, dtype=float)))


def _class_of(grid, z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    hits = np.flatnonzero(np.all(grid.z_values == z[None, :], axis=1))
    if len(hits) == 0:
        raise AbsentRowError(f"{z.tolist()} is not a z-component of stage {grid.stage}")
    return int(hits[0])


def _row_inputs(gridset, k, w, cls):
    row = gridset.row(k, cls)
    cur = gridset.grids[k]
    w = np.nan_to_num(np.asarray(w, dtype=float), nan=0.0)
    return row, cur.s_values, w[cur.z_class]


def op_J_hat(model, gridset, k, w, z_class, s):
    """``J_hat_k(w, g)(z, s)`` for stage-``k - 1`` z-class ``z_class``.

    ``w`` holds one value per stage-``k`` z-class.
    """
    row, s_next, w_next = _row_inputs(gridset, k, w, z_class)
    z = gridset.grids[k - 1].z_values[z_class][None, :]
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    g_stop = model.reward(model.flow(np.repeat(z, len(s_arr), axis=0), s_arr))
    out = j_hat(row, s_next, w_next, g_stop, s_arr)
    return float(out[0]) if np.ndim(s) == 0 else out


def op_K_hat(gridset, k, w, z_class):
    """``K_hat_k(w)(z)`` for stage-``k - 1`` z-class ``z_class``."""
    row, _, w_next = _row_inputs(gridset, k, w, z_class)
    return k_hat(row, w_next)


def _argmax_smallest(values):
    best = values.max()
    return int(np.argmax(values >= best - _tie_tol(best))), float(best)


def op_L_hat(model, gridset, k, w, z_class, timegrid):
    """Return ``(value, s_star, continuation)``.

    ``s_star`` is the smallest node maximizing ``J_hat``; ``continuation`` is
    true only when ``K_hat`` strictly exceeds that maximum.
    """
    nodes = timegrid.nodes
    jvals = op_J_hat(model, gridset, k, w, z_class, nodes)
    i, jmax = _argmax_smallest(np.atleast_1d(jvals))
    kval = op_K_hat(gridset, k, w, z_class)
    continuation = bool(kval > jmax + _tie_tol(jmax))
    return max(jmax, kval), float(nodes[i]), continuation


@dataclass(eq=False)
class StageValues:
    """Per-class results of one stage.

    For ``stage < N`` the argmax node and flag come from the comparison of
    the stage-``stage + 1`` operators.  Unreachable classes hold NaN.
    """

    stage: int
    z: np.ndarray
    v_hat: np.ndarray
    s_star: np.ndarray
    continuation: np.ndarray
    reachable: np.ndarray
    delta: np.ndarray
    n_nodes: np.ndarray
    clipped: np.ndarray


@dataclass(eq=False)
class ValueTable:
    """Approximate value functions on every stage grid."""

    stages: list
    V0_hat: float
    delta_request: object = None

    @property
    def N(self):
        return len(self.stages) - 1

    @property
    def clipping_count(self):
        return int(sum(int(np.sum(st.clipped & st.reachable)) for st in self.stages[:-1]))

    def to_dict(self):
        def clean(a):
            return [None if not np.isfinite(x) else float(x) for x in np.asarray(a, dtype=float)]

        return {
            "V0_hat": float(self.V0_hat),
            "delta_request": self.delta_request,
            "stages": [
                {
                    "stage": st.stage,
                    "z": st.z.tolist(),
                    "v_hat": clean(st.v_hat),
                    "s_star": clean(st.s_star),
                    "continuation_flag": [bool(f) for f in st.continuation],
                    "reachable": [bool(f) for f in st.reachable],
                    "delta": clean(st.delta),
                    "n_nodes": [int(n) for n in st.n_nodes],
                    "clipped": [bool(f) for f in st.clipped],
                }
                for st in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        def arr(a):
            return np.array([np.nan if x is None else x for x in a], dtype=float)

        stages = [
            StageValues(
                stage=int(st["stage"]),
                z=np.asarray(st["z"], dtype=float),
                v_hat=arr(st["v_hat"]),
                s_star=arr(st["s_star"]),
                continuation=np.asarray(st["continuation_flag"], dtype=bool),
                reachable=np.asarray(st["reachable"], dtype=bool),
                delta=arr(st["delta"]),
                n_nodes=np.asarray(st["n_nodes"], dtype=np.int64),
                clipped=np.asarray(st["clipped"], dtype=bool),
            )
            for st in doc["stages"]
        ]
        return cls(stages, float(doc["V0_hat"]), doc.get("delta_request"))


def _stage_delta(delta_request, n, N):
    if np.ndim(delta_request) == 0:
        return float(delta_request)
    table = np.asarray(delta_request, dtype=float)
    if len(table) != N:
        raise ValueError(f"per-stage delta table must have {N} entries")
    return float(table[n])


def backward_solve(model, gridset, delta_request):
    """Run ``v_N = g``, ``v_{k-1} = L_hat_k(v_k, g)`` on the stage grids.

    ``delta_request`` is a constant step or one step per stage ``0..N-1``.
    """
    if not gridset.has_transitions:
        raise AbsentRowError("transition weights have not been estimated")
    N = gridset.N
    if np.any(np.asarray(delta_request, dtype=float) <= 0):
        raise ValueError("delta must be > 0")
    last = gridset.grids[N]
    nan = np.full(last.n_classes, np.nan)
    v_next = np.asarray(model.reward(last.z_values), dtype=float)
    stages = [
        StageValues(
            N, last.z_values, v_next, nan.copy(), np.zeros(last.n_classes, bool),
            gridset.reachable(N), nan.copy(), np.zeros(last.n_classes, np.int64),
            np.zeros(last.n_classes, bool),
        )
    ]
    for k in range(N, 0, -1):
        prev, cur = gridset.grids[k - 1], gridset.grids[k]
        reach = gridset.visits[k] > 0
        P = gridset.transitions[k][reach]
        z = prev.z_values[reach]
        w_pts = np.nan_to_num(v_next, nan=0.0)[cur.z_class]
        order = np.argsort(cur.s_values, kind="stable")
        s_sorted = cur.s_values[order]
        Ps = P[:, order]
        zeros = np.zeros((len(P), 1))
        cumP = np.hstack([zeros, np.cumsum(Ps, axis=1)])
        cumPW = np.hstack([zeros, np.cumsum(Ps * w_pts[order][None, :], axis=1)])
        totP = cumP[:, -1]
        kvals = P @ w_pts

        tstar = np.asarray(model.exit_time(z), dtype=float)
        delta, n_nodes, clipped = _grid_sizes(tstar, _stage_delta(delta_request, k - 1, N))
        width = int(n_nodes.max()) + 1
        nodes = np.arange(width)[None, :] * delta[:, None]
        valid = np.arange(width)[None, :] <= n_nodes[:, None]
        nodes = np.where(valid, nodes, 0.0)
        flat_z = np.repeat(z, width, axis=0)
        g_stop = np.asarray(model.reward(model.flow(flat_z, nodes.reshape(-1))), dtype=float)
        g_stop = g_stop.reshape(len(z), width)
        cnt = np.searchsorted(s_sorted, nodes, side="left")
        rows = np.arange(len(z))[:, None]
        jvals = cumPW[rows, cnt] + g_stop * (totP[:, None] - cumP[rows, cnt])
        jvals = np.where(valid, jvals, -np.inf)
        jmax = jvals.max(axis=1)
        first = np.argmax(jvals >= (jmax - _tie_tol(jmax))[:, None], axis=1)
        s_star = nodes[np.arange(len(z)), first]
        cont = kvals > jmax + _tie_tol(jmax)

        c = prev.n_classes

        def spread(values, fill, dtype=float):
            out = np.full(c, fill, dtype=dtype)
            out[reach] = values
            return out

        v_prev = spread(np.maximum(jmax, kvals), np.nan)
        stages.append(
            StageValues(
                k - 1, prev.z_values, v_prev, spread(s_star, np.nan), spread(cont, False, bool),
                reach, spread(delta, np.nan), spread(n_nodes, 0, np.int64), spread(clipped, False, bool),
            )
        )
        v_next = v_prev
    stages.reverse()
    x0_class = int(gridset.grids[0].z_class[0])
    delta_echo = float(delta_request) if np.ndim(delta_request) == 0 else [float(d) for d in delta_request]
    return ValueTable(stages, float(stages[0].v_hat[x0_class]), delta_echo)


@dataclass(eq=False)
class OracleResult:
    """Continuous recursion evaluated on a state mesh.

    ``values[k]`` is ``v_k`` on ``mesh``; ``at_x0[k]`` is ``v_k(x0)`` computed
    directly; ``continuation[k]`` is ``Q v_{k+1}``.
    """

    mesh: np.ndarray
    values: list
    at_x0: np.ndarray
    continuation: np.ndarray

    @property
    def V0(self):
        return float(self.at_x0[0])


def _stop_value(model, x, t, c):
    lam = cumulative_hazard(model, x, t)
    surv = np.exp(-lam)
    g = np.asarray(model.reward(model.flow(x, t)), dtype=float)
    return c * (1.0 - surv) + g * surv


def _sup_one_step(model, x, c, t_points, tol):
    """``sup_{t <= t*(x)} [c (1 - e^{-Lambda}) + g(flow) e^{-Lambda}]`` per row of ``x``."""
    tstar = np.asarray(model.exit_time(x), dtype=float)
    n = len(x)
    frac = np.linspace(0.0, 1.0, t_points)
    T = tstar[:, None] * frac[None, :]
    xs = np.repeat(x, t_points, axis=0)
    vals = _stop_value(model, xs, T.reshape(-1), c).reshape(n, t_points)
    best = np.argmax(vals, axis=1)
    out = vals[np.arange(n), best]
    step = tstar / (t_points - 1)
    lo = np.maximum(T[np.arange(n), best] - step, 0.0)
    hi = np.minimum(T[np.arange(n), best] + step, tstar)
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a = hi - inv_phi * (hi - lo)
    b = lo + inv_phi * (hi - lo)
    fa, fb = _stop_value(model, x, a, c), _stop_value(model, x, b, c)
    while np.max(hi - lo, initial=0.0) > tol:
        left = fa >= fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        a = hi - inv_phi * (hi - lo)
        b = lo + inv_phi * (hi - lo)
        fa, fb = _stop_value(model, x, a, c), _stop_value(model, x, b, c)
    refined = _stop_value(model, x, 0.5 * (lo + hi), c)
    return np.maximum(out, refined)


def continuous_oracle(model, x0, N, t_search_points=1024, quad_tol=1e-10, state_points=2048, golden_tol=1e-8):
    """Evaluate ``v_N = g``, ``v_k = L(v_{k+1}, g)`` for a state-independent kernel.

    With ``Qw`` a constant ``c``, ``K w = c`` and
    ``J(w, g)(x, t) = c (1 - e^{-Lambda(x, t)}) + g(flow(x, t)) e^{-Lambda(x, t)}``.
    Each ``v_k`` is stored on a uniform mesh of the closure of a
    one-dimensional state space and read back by linear interpolation when
    integrating against the kernel.

    Raises
    ------
    UnsupportedModelError
        If the kernel is not flagged state-independent or the model is not
        one-dimensional with known state bounds.
    """
    if not model.kernel_state_independent or model.kernel_expectation is None:
        raise UnsupportedModelError("continuous_oracle needs a state-independent kernel")
    if model.state_dim != 1 or model.state_bounds is None:
        raise UnsupportedModelError("continuous_oracle needs a one-dimensional model with state_bounds")
    N = int(N)
    if N < 0:
        raise ValueError("N must be >= 0")
    lo, hi = model.state_bounds
    mesh = np.linspace(lo, hi, state_points)
    xm = mesh[:, None]
    x0s = as_states(model, x0)
    values = [None] * (N + 1)
    at_x0 = np.empty(N + 1)
    conts = np.full(N + 1, np.nan)
    values[N] = np.asarray(model.reward(xm), dtype=float)
    at_x0[N] = float(model.reward(x0s)[0])

    def reward_fn(y):
        return model.reward(np.atleast_2d(y))

    w_next = reward_fn
    for k in range(N - 1, -1, -1):
        with warnings.catch_warnings():
            # piecewise-linear integrands trip the adaptive-quadrature roundoff warning
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            c = float(model.kernel_expectation(w_next, quad_tol))
        conts[k] = c
        values[k] = np.maximum(_sup_one_step(model, xm, c, t_search_points, golden_tol), c)
        at_x0[k] = max(float(_sup_one_step(model, x0s, c, t_search_points, golden_tol)[0]), c)
        mesh_vals = values[k]

        def w_next(y, mesh_vals=mesh_vals):
            return np.interp(np.asarray(y, dtype=float)[:, 0], mesh, mesh_vals)

    return OracleResult(mesh, values, at_x0, conts)


def write_oracle_csv(fh, result, stage):
    """Mesh dump of one stage with header ``x,v_<stage>(x)``."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["x", f"v_{stage}(x)"])
    for x, v in zip(result.mesh, result.values[stage]):
        writer.writerow([repr(float(x)), repr(float(v))])
