"""Computable stopping rule built from the quantized value table."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import AbsentRowError
from .model import as_states, sample_interjump
from .quantization import nearest_indices
from .simulation import DEFAULT_BLOCK_SIZE, map_blocks, sup_rewards_streamed
from .validation import check_fraction, check_positive_int

__all__ = [
    "StoppingPolicy",
    "StoppingOutcome",
    "RuleOutcomes",
    "EvaluationResult",
    "build_policy",
    "choose_beta",
    "r_threshold",
    "thresholds",
    "apply_rule",
    "run_rule",
    "evaluate_rule",
    "robust_mean",
    "write_evaluation_csv",
    "write_outcomes_csv",
    "EVALUATION_CSV_HEADER",
    "OUTCOME_CSV_HEADER",
]

EVALUATION_CSV_HEADER = ["n_mc", "V_bar_0", "stderr", "E_sup", "B1", "beta", "feasible"]
OUTCOME_CSV_HEADER = ["traj_id", "stop_stage", "tau", "reward", "reason"]
THRESHOLD = "threshold-before-jump"
EXHAUSTED = "exhausted-horizon"


@dataclass(eq=False)
class StoppingPolicy:
    """Per-stage decision data for stages ``0..N-1``.

    ``continuation[n]`` and ``s_star[n]`` are indexed by stage-``n`` z-class and
    come from comparing the stage-``n + 1`` operators.
    """

    gridset: object
    beta: float
    continuation: list
    s_star: list
    reachable: list
    min_delta: float
    feasible: bool
    a: float = None

    @property
    def N(self):
        return len(self.continuation)


def build_policy(values, gridset, beta, a=None):
    """Copy flags and argmax nodes from ``values``.

    The policy is marked infeasible (but still built) when ``beta`` is not
    below every reachable step ``delta(z)``.
    """
    beta = float(beta)
    if not beta >= 0:
        raise ValueError("beta must be >= 0")
    if values.N != gridset.N:
        raise ValueError("value table and grid set have different horizons")
    stages = values.stages[:-1]
    deltas = np.concatenate([st.delta[st.reachable] for st in stages])
    min_delta = float(deltas.min()) if deltas.size else math.inf
    return StoppingPolicy(
        gridset=gridset,
        beta=beta,
        continuation=[st.continuation.copy() for st in stages],
        s_star=[st.s_star.copy() for st in stages],
        reachable=[st.reachable.copy() for st in stages],
        min_delta=min_delta,
        feasible=bool(beta < min_delta),
        a=None if a is None else float(a),
    )


def choose_beta(constants, errors, a=0.5, min_delta=math.inf):
    """Largest per-stage offset ``a (2 C_lambda)^{-1/2} ([t*]/(1-a) e_Z(n) + e_S(n+1))^{1/2}``.

    Returns ``(beta, feasible)`` with ``feasible = beta / a < min_delta``.
    """
    a = check_fraction(a)
    e_Z = np.asarray(errors["e_Z"], dtype=float)
    e_S = np.asarray(errors["e_S"], dtype=float)
    inner = constants.lip_tstar / (1.0 - a) * e_Z[:-1] + e_S[1:]
    betas = a * np.sqrt(inner / (2.0 * constants.C_lambda))
    beta = float(betas.max()) if betas.size else 0.0
    return beta, bool(beta / a < min_delta)


def _stage_classes(policy, n, Z, S):
    """Stage-``n`` z-classes of the projected points, redirecting unreachable ones.

    Points landing in a class without a transition row are re-projected onto
    the reachable part of the codebook.  Returns ``(classes, n_redirected)``.
    """
    gs = policy.gridset
    grid = gs.grids[n]
    pts = np.column_stack([Z, S])
    cls = grid.z_class[gs.project(n, pts)]
    bad = ~policy.reachable[n][cls]
    if np.any(bad):
        keep = np.flatnonzero(policy.reachable[n][grid.z_class])
        if keep.size == 0:
            raise AbsentRowError(f"stage {n} has no reachable codebook point")
        sub = nearest_indices(grid.codebook[keep], pts[bad], gs.p, gs.component_weights)
        cls[bad] = grid.z_class[keep[sub]]
    return cls, int(bad.sum())


def _threshold_from(policy, n, cls, tstar):
    s_star = policy.s_star[n][cls]
    r = np.where(s_star < tstar, s_star, tstar - policy.beta)
    return np.where(policy.continuation[n][cls], tstar, r)


def thresholds(model, policy, n, Z, S):
    """Vectorized threshold times for stage ``n``; returns ``(r, n_redirected)``."""
    Z = np.asarray(Z, dtype=float).reshape(len(S), -1)
    cls, redirected = _stage_classes(policy, n, Z, np.asarray(S, dtype=float))
    tstar = np.asarray(model.exit_time(Z), dtype=float)
    return _threshold_from(policy, n, cls, tstar), redirected


def r_threshold(model, policy, n, z, s):
    """Threshold time for state ``z`` at stage ``n`` with last inter-jump time ``s``.

    Uses the real exit time ``t*(z)`` together with the quantized decision data.

    Raises
    ------
    AbsentRowError
        If ``(z, s)`` projects onto a class with no transition row.
    """
    if not 0 <= n < policy.N:
        raise ValueError(f"stage must lie in [0, {policy.N - 1}]")
    zs = as_states(model, z)
    gs = policy.gridset
    idx = gs.project(n, np.column_stack([zs, [float(s)]]))
    cls = gs.grids[n].z_class[idx]
    if not policy.reachable[n][cls[0]]:
        raise AbsentRowError(f"stage {n} z-class {int(cls[0])} was never visited")
    tstar = np.asarray(model.exit_time(zs), dtype=float)
    return float(_threshold_from(policy, n, cls, tstar)[0])


@dataclass(frozen=True)
class StoppingOutcome:
    """One realization of the stopping rule."""

    tau: float
    stage: int
    reason: str
    reward: float
    state: tuple


@dataclass(eq=False)
class RuleOutcomes:
    """Vectorized outcomes over a batch of chains."""

    tau: np.ndarray
    stage: np.ndarray
    reward: np.ndarray
    redirected: int = 0

    @property
    def reason(self):
        N = self.horizon
        return np.where(self.stage < N, THRESHOLD, EXHAUSTED)

    horizon: int = field(default=0)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        return cls(
            np.concatenate([p.tau for p in parts]),
            np.concatenate([p.stage for p in parts]),
            np.concatenate([p.reward for p in parts]),
            sum(p.redirected for p in parts),
            parts[0].horizon if parts else 0,
        )


def apply_rule(model, policy, batch):
    """Run the rule on pre-simulated chains.

    At stage ``n`` the decision reads only ``(Z_n, S_n)`` and compares the
    threshold with ``S_{n+1}``; a path stops when ``S_{n+1} > r``.
    """
    N = policy.N
    if batch.horizon != N:
        raise ValueError(f"chains have horizon {batch.horizon}, policy has {N}")
    n_paths = batch.n_paths
    T = batch.T
    tau = T[:, N].copy()
    stage = np.full(n_paths, N, dtype=np.int64)
    reward = np.asarray(model.reward(batch.Z[:, N, :]), dtype=float).copy()
    active = np.ones(n_paths, dtype=bool)
    redirected = 0
    for n in range(N):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Z = batch.Z[idx, n, :]
        r, red = thresholds(model, policy, n, Z, batch.S[idx, n])
        redirected += red
        stop = batch.S[idx, n + 1] > r
        hit = idx[stop]
        if hit.size:
            r_hit = r[stop]
            tau[hit] = T[hit, n] + r_hit
            stage[hit] = n
            reward[hit] = model.reward(model.flow(Z[stop], r_hit))
            active[hit] = False
    return RuleOutcomes(tau, stage, reward, redirected, N)


def run_rule(model, policy, x0, rng):
    """Forward simulation of one path under the rule.

    Draws are consumed in the same order as the chain simulator (one
    exponential, then one uniform per stage), so the decision prefix matches
    :func:`apply_rule` on a chain simulated from the same generator.
    """
    N = policy.N
    z = as_states(model, x0)
    s_prev, t_prev = 0.0, 0.0
    for n in range(N):
        r, _ = thresholds(model, policy, n, z, np.array([s_prev]))
        r = float(r[0])
        s, _ = sample_interjump(model, z, rng.standard_exponential(1))
        s = float(s[0])
        if s > r:
            stop = model.flow(z, np.array([r]))
            return StoppingOutcome(t_prev + r, n, THRESHOLD, float(model.reward(stop)[0]), tuple(stop[0]))
        pre = model.flow(z, np.array([s]))
        z = np.asarray(model.kernel_sample(pre, rng.random(1)), dtype=float)
        t_prev += s
        s_prev = s
    return StoppingOutcome(t_prev, N, EXHAUSTED, float(model.reward(z)[0]), tuple(z[0]))


def robust_mean(x):
    """Mean and standard error, shifted by the first sample.

    The shift makes the mean of a constant sample exact.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n == 0:
        raise ValueError("empty sample")
    shift = x[0]
    mean = shift + math.fsum(x - shift) / n
    se = float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return float(mean), se


@dataclass(eq=False)
class EvaluationResult:
    """Monte-Carlo evaluation of a policy."""

    n_mc: int
    V_bar_0: float
    stderr: float
    E_sup: float
    E_sup_stderr: float
    beta: float
    feasible: bool
    outcomes: RuleOutcomes = None

    @property
    def B1(self):
        return self.E_sup - self.V_bar_0

    @property
    def B1_stderr(self):
        return math.hypot(self.stderr, self.E_sup_stderr)

    @property
    def redirected(self):
        return 0 if self.outcomes is None else self.outcomes.redirected


def evaluate_rule(
    model, policy, x0, n_mc, seed=0, threads=1, block_size=DEFAULT_BLOCK_SIZE, keep_outcomes=False
):
    """Estimate the rule's value and the empirical gap to ``E[sup_{t <= T_N} g]``.

    The rule runs on chains from stream tag ``"evaluate"``; the supremum uses
    an independent tag ``"sup"``.
    """
    n_mc = check_positive_int(n_mc, "n_mc", minimum=2)
    N = policy.N
    parts = map_blocks(
        model, x0, N, n_mc, seed, "evaluate", lambda b: apply_rule(model, policy, b), block_size, threads
    )
    out = RuleOutcomes.concatenate(parts)
    v, se = robust_mean(out.reward)
    sups = sup_rewards_streamed(model, x0, N, n_mc, seed, "sup", block_size, threads)
    e_sup, se_sup = robust_mean(sups)
    return EvaluationResult(
        n_mc, v, se, e_sup, se_sup, policy.beta, policy.feasible, out if keep_outcomes else None
    )


def _fmt(x):
    return repr(float(x))


def write_evaluation_csv(fh, result):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(EVALUATION_CSV_HEADER)
    writer.writerow(
        [
            result.n_mc,
            _fmt(result.V_bar_0),
            _fmt(result.stderr),
            _fmt(result.E_sup),
            _fmt(result.B1),
            _fmt(result.beta),
            int(result.feasible),
        ]
    )


def write_outcomes_csv(fh, outcomes):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(OUTCOME_CSV_HEADER)
    for i, (st, tau, rew, why) in enumerate(zip(outcomes.stage, outcomes.tau, outcomes.reward, outcomes.reason)):
        writer.writerow([i, int(st), _fmt(tau), _fmt(rew), why])
