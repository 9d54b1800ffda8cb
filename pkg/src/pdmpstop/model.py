"""PDMP model description and the hazard machinery of a single jump.

States are handled in batches: every model callable receives an array of
shape ``(n, state_dim)`` (and times of shape ``(n,)``) and answers with one
value per row.  Scalars are accepted by the public helpers and promoted.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from .exceptions import DomainError

__all__ = [
    "ModelConstants",
    "PdmpModel",
    "as_states",
    "is_single_state",
    "cumulative_hazard",
    "sample_interjump",
    "make_example_model",
]

HAZARD_ABS_TOL = 1e-8
HAZARD_MAX_PANELS = 2**14
TIME_TOL = 1e-10


@dataclass(frozen=True)
class ModelConstants:
    """Bounds and Lipschitz constants of the local characteristics.

    ``lip_g`` is the plain Lipschitz constant of the reward on the closure of
    the state space; when left as ``None`` the along-flow constant
    ``lip_g_1`` is used in its place.
    """

    C_lambda: float
    lip_lambda: float
    C_tstar: float
    lip_tstar: float
    lip_Q: float
    C_g: float
    lip_g_1: float
    lip_g_2: float
    lip_g_star: float
    lip_g: Optional[float] = None

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value is None:
                continue
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"constant {name} must be finite and >= 0, got {value}")
        if self.C_lambda <= 0 or self.C_tstar <= 0:
            raise ValueError("C_lambda and C_tstar must be > 0")

    @property
    def reward_lipschitz(self):
        return self.lip_g_1 if self.lip_g is None else self.lip_g

    def as_dict(self):
        return {
            "C_lambda": self.C_lambda,
            "lip_lambda": self.lip_lambda,
            "C_tstar": self.C_tstar,
            "lip_tstar": self.lip_tstar,
            "lip_Q": self.lip_Q,
            "C_g": self.C_g,
            "lip_g_1": self.lip_g_1,
            "lip_g_2": self.lip_g_2,
            "lip_g_star": self.lip_g_star,
            "lip_g": self.lip_g,
        }


@dataclass(frozen=True)
class PdmpModel:
    """Local characteristics of a piecewise deterministic Markov process.

    Parameters
    ----------
    state_dim : int
        Dimension of the state space.
    flow : callable
        ``flow(x, t)`` -> states; the deterministic motion.
    jump_rate : callable
        ``jump_rate(x)`` -> nonnegative rates.
    exit_time : callable
        ``exit_time(x)`` -> time for the flow started at ``x`` to hit the
        boundary.
    kernel_sample : callable
        ``kernel_sample(x, u)`` -> post-jump states, one per row of ``x``,
        driven by uniform draws ``u`` of shape ``(n,)``.  Must accept
        boundary points.
    reward : callable
        ``reward(x)`` -> rewards.
    constants : ModelConstants
    kernel_expectation : callable, optional
        ``kernel_expectation(w, tol)`` -> scalar ``Qw``; only meaningful when
        ``kernel_state_independent`` is set.
    kernel_state_independent : bool
        ``Q(x, .)`` does not depend on ``x``.
    hazard : callable, optional
        Analytic ``hazard(x, t)`` replacing quadrature.
    inverse_hazard : callable, optional
        Analytic ``inverse_hazard(x, e)`` returning the time at which the
        cumulative hazard from ``x`` reaches ``e`` (may exceed the exit time).
    reward_monotone_along_flow : bool
        ``reward(flow(x, .))`` is nondecreasing, so its supremum over a
        segment sits at the right end.
    state_bounds : tuple, optional
        ``(lo, hi)`` of the closure of a one-dimensional state space.
    tag : str
        Short identifier written into persisted artifacts.
    """

    state_dim: int
    flow: Callable
    jump_rate: Callable
    exit_time: Callable
    kernel_sample: Callable
    reward: Callable
    constants: ModelConstants
    kernel_expectation: Optional[Callable] = None
    kernel_state_independent: bool = False
    hazard: Optional[Callable] = None
    inverse_hazard: Optional[Callable] = None
    reward_monotone_along_flow: bool = False
    state_bounds: Optional[tuple] = None
    tag: str = "user"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.state_dim) < 1:
            raise ValueError("state_dim must be a positive integer")


def as_states(model, x):
    """Promote ``x`` to a float array of shape ``(n, state_dim)``."""
    arr = np.asarray(x, dtype=float)
    d = model.state_dim
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if d == 1 else arr.reshape(1, d)
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ValueError(f"states must have shape (n, {d}), got {arr.shape}")
    return arr


def is_single_state(model, x):
    """True when ``x`` denotes one state rather than a batch."""
    return np.ndim(x) == 0 if model.state_dim == 1 else np.ndim(x) == 1


def _simpson(f, t, panels):
    # f maps (n, m) nodes to (n, m) values; t has shape (n,)
    frac = np.linspace(0.0, 1.0, panels + 1)
    nodes = t[:, None] * frac[None, :]
    vals = f(nodes)
    h = t / panels
    return h / 3.0 * (
        vals[:, 0] + vals[:, -1] + 4.0 * vals[:, 1:-1:2].sum(axis=1) + 2.0 * vals[:, 2:-1:2].sum(axis=1)
    )


def hazard_quadrature(model, x, t, tol=HAZARD_ABS_TOL):
    """Cumulative hazard by composite Simpson with panel doubling.

    Stops when successive estimates agree to ``15 * tol`` (Richardson), or at
    ``HAZARD_MAX_PANELS`` panels.
    """
    x = as_states(model, x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).copy()

    def integrand(nodes):
        n, m = nodes.shape
        xs = np.repeat(x, m, axis=0)
        rate = model.jump_rate(model.flow(xs, nodes.reshape(-1)))
        return np.asarray(rate, dtype=float).reshape(n, m)

    panels = 2
    prev = _simpson(integrand, t, panels)
    while panels < HAZARD_MAX_PANELS:
        panels *= 2
        cur = _simpson(integrand, t, panels)
        if np.max(np.abs(cur - prev), initial=0.0) < 15.0 * tol:
            return cur
        prev = cur
    return prev


def cumulative_hazard(model, x, t, use_analytic=True):
    """Integrated jump rate along the flow from ``x`` over ``[0, t]``.

    Raises
    ------
    DomainError
        If some ``t`` lies outside ``[0, exit_time(x)]``.
    """
    xs = as_states(model, x)
    ts = np.broadcast_to(np.asarray(t, dtype=float), (xs.shape[0],))
    tstar = np.asarray(model.exit_time(xs), dtype=float)
    slack = 1e-12 * np.maximum(1.0, tstar)
    if np.any(ts < 0) or np.any(ts > tstar + slack):
        raise DomainError("t must lie in [0, exit_time(x)]")
    ts = np.minimum(ts, tstar)
    if use_analytic and model.hazard is not None:
        out = np.asarray(model.hazard(xs, ts), dtype=float)
    else:
        out = hazard_quadrature(model, xs, ts)
    if is_single_state(model, x) and np.ndim(t) == 0:
        return float(out[0])
    return out


def _invert_hazard(model, x, e, tstar):
    # bracketed bisection on [0, t*], then one regula-falsi polish inside the bracket
    lo = np.zeros_like(tstar)
    hi = tstar.copy()
    flo = -e
    fhi = cumulative_hazard(model, x, hi, use_analytic=True) - e
    while np.max(hi - lo, initial=0.0) > TIME_TOL:
        mid = 0.5 * (lo + hi)
        fmid = cumulative_hazard(model, x, mid, use_analytic=True) - e
        right = fmid >= 0
        hi = np.where(right, mid, hi)
        fhi = np.where(right, fmid, fhi)
        lo = np.where(right, lo, mid)
        flo = np.where(right, flo, fmid)
    denom = fhi - flo
    with np.errstate(invalid="ignore", divide="ignore"):
        polished = lo - flo * (hi - lo) / denom
    ok = np.isfinite(polished) & (polished >= lo) & (polished <= hi)
    return np.where(ok, polished, hi)


def sample_interjump(model, x, exp_draw):
    """Inter-jump time from ``x`` driven by unit-exponential draws.

    Returns ``(S, forced)``: ``S = inf{t : Lambda(x, t) >= exp_draw}`` when that
    happens before the exit time, otherwise the exit time with ``forced`` set.
    """
    xs = as_states(model, x)
    e = np.broadcast_to(np.asarray(exp_draw, dtype=float), (xs.shape[0],)).copy()
    if np.any(~(e > 0)):
        raise ValueError("exponential draws must be > 0")
    tstar = np.asarray(model.exit_time(xs), dtype=float)
    if model.inverse_hazard is not None:
        t = np.asarray(model.inverse_hazard(xs, e), dtype=float)
        forced = ~(t < tstar)
    else:
        total = cumulative_hazard(model, xs, tstar)
        forced = total <= e
        t = np.empty_like(tstar)
        free = ~forced
        if np.any(free):
            t[free] = _invert_hazard(model, xs[free], e[free], tstar[free])
    s = np.where(forced, tstar, t)
    if is_single_state(model, x) and np.ndim(exp_draw) == 0:
        return float(s[0]), bool(forced[0])
    return s, forced


def make_example_model(v=1.0, alpha=1.0, rate_beta=3.0):
    """The one-dimensional test process on ``[0, 1)``.

    Motion at constant speed ``v`` towards 1, jump rate ``rate_beta * x**alpha``,
    post-jump law uniform on ``[0, 1/2]``, reward ``g(x) = x``.
    """
    v = float(v)
    alpha = float(alpha)
    rate_beta = float(rate_beta)
    if not v > 0:
        raise ValueError("v must be > 0")
    if not alpha >= 1:
        raise ValueError("alpha must be >= 1")
    if not rate_beta > 0:
        raise ValueError("rate_beta must be > 0")
    a1 = alpha + 1.0
    scale = rate_beta / (v * a1)

    def flow(x, t):
        return x + v * np.asarray(t, dtype=float)[:, None]

    def jump_rate(x):
        return rate_beta * np.clip(x[:, 0], 0.0, None) ** alpha

    def exit_time(x):
        return (1.0 - x[:, 0]) / v

    def kernel_sample(x, u):
        return 0.5 * np.asarray(u, dtype=float).reshape(-1, 1)

    def reward(x):
        return x[:, 0].copy()

    def hazard(x, t):
        x0 = x[:, 0]
        return scale * ((x0 + v * t) ** a1 - x0**a1)

    def inverse_hazard(x, e):
        x0 = x[:, 0]
        return ((e / scale + x0**a1) ** (1.0 / a1) - x0) / v

    def kernel_expectation(w, tol=1e-10):
        def f(y):
            return float(np.asarray(w(np.array([[y]])), dtype=float)[0])

        val, _ = integrate.quad(f, 0.0, 0.5, epsabs=tol, epsrel=tol, limit=500)
        return 2.0 * val

    constants = ModelConstants(
        C_lambda=rate_beta,
        lip_lambda=rate_beta * alpha,
        C_tstar=1.0 / v,
        lip_tstar=1.0 / v,
        lip_Q=0.0,
        C_g=1.0,
        lip_g_1=1.0,
        lip_g_2=v,
        lip_g_star=0.0,
        lip_g=1.0,
    )
    return PdmpModel(
        state_dim=1,
        flow=flow,
        jump_rate=jump_rate,
        exit_time=exit_time,
        kernel_sample=kernel_sample,
        reward=reward,
        constants=constants,
        kernel_expectation=kernel_expectation,
        kernel_state_independent=True,
        hazard=hazard,
        inverse_hazard=inverse_hazard,
        reward_monotone_along_flow=True,
        state_bounds=(0.0, 1.0),
        tag=f"example(v={v!r},alpha={alpha!r},rate_beta={rate_beta!r})",
        params={"v": v, "alpha": alpha, "rate_beta": rate_beta},
    )
