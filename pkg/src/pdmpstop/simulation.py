"""Exact simulation of the post-jump / inter-jump chain."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .model import as_states, sample_interjump

__all__ = [
    "Trajectory",
    "ChainBatch",
    "simulate_chains",
    "simulate_chain",
    "simulate_chains_streamed",
    "map_blocks",
    "sup_rewards_streamed",
    "sup_reward_along_path",
    "sup_rewards",
    "write_trajectories_csv",
    "TRAJECTORY_CSV_HEADER",
]

DEFAULT_BLOCK_SIZE = 16384
TRAJECTORY_CSV_HEADER = ["traj_id", "k", "Z", "S", "T", "boundary_forced"]
_SUP_GRID_POINTS = 1000
_GOLDEN_TOL = 1e-8


@dataclass(frozen=True)
class Trajectory:
    """Jump skeleton of one path: ``Z_0..Z_N``, ``S_0..S_N`` (``S_0 = 0``)."""

    post_jump_states: np.ndarray
    interjump_times: np.ndarray
    boundary_forced: np.ndarray

    @property
    def jump_times(self):
        return np.cumsum(self.interjump_times)

    @property
    def horizon(self):
        return len(self.interjump_times) - 1

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            np.array_equal(self.post_jump_states, other.post_jump_states)
            and np.array_equal(self.interjump_times, other.interjump_times)
            and np.array_equal(self.boundary_forced, other.boundary_forced)
        )


@dataclass
class ChainBatch:
    """Many independent chains stored column-wise.

    Attributes
    ----------
    Z : ndarray of shape (n_paths, N + 1, state_dim)
    S : ndarray of shape (n_paths, N + 1)
    forced : ndarray of bool, shape (n_paths, N + 1)
    """

    Z: np.ndarray
    S: np.ndarray
    forced: np.ndarray

    @property
    def n_paths(self):
        return self.S.shape[0]

    @property
    def horizon(self):
        return self.S.shape[1] - 1

    @property
    def T(self):
        return np.cumsum(self.S, axis=1)

    def theta(self, n):
        """Samples of ``(Z_n, S_n)`` as rows of length ``state_dim + 1``."""
        return np.column_stack([self.Z[:, n, :], self.S[:, n]])

    def as_array(self):
        """Chains as one array of shape ``(n_paths, N + 1, state_dim + 1)``."""
        return np.concatenate([self.Z, self.S[:, :, None]], axis=2)

    def trajectory(self, i):
        return Trajectory(self.Z[i].copy(), self.S[i].copy(), self.forced[i].copy())

    @classmethod
    def concatenate(cls, batches):
        batches = list(batches)
        return cls(
            np.concatenate([b.Z for b in batches]),
            np.concatenate([b.S for b in batches]),
            np.concatenate([b.forced for b in batches]),
        )


def simulate_chains(model, x0, N, n_paths, rng):
    """Simulate ``n_paths`` chains up to the ``N``-th jump with one generator.

    Each stage consumes ``n_paths`` exponential draws (inter-jump times)
    followed by ``n_paths`` uniforms (post-jump locations).
    """
    N = int(N)
    if N < 0:
        raise ValueError("N must be >= 0")
    n_paths = int(n_paths)
    d = model.state_dim
    start = as_states(model, x0)
    if start.shape[0] != 1:
        raise ValueError("x0 must be a single state")
    Z = np.empty((n_paths, N + 1, d))
    S = np.zeros((n_paths, N + 1))
    forced = np.zeros((n_paths, N + 1), dtype=bool)
    Z[:, 0, :] = start[0]
    for k in range(1, N + 1):
        prev = Z[:, k - 1, :]
        e = rng.standard_exponential(n_paths)
        s, f = sample_interjump(model, prev, e)
        pre_jump = model.flow(prev, s)
        u = rng.random(n_paths)
        Z[:, k, :] = model.kernel_sample(pre_jump, u)
        S[:, k] = s
        forced[:, k] = f
    return ChainBatch(Z, S, forced)


def simulate_chain(model, x0, N, rng):
    """Simulate one :class:`Trajectory`."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return simulate_chains(model, x0, N, 1, rng).trajectory(0)


def map_blocks(model, x0, N, n_paths, seed, tag, fn, block_size=DEFAULT_BLOCK_SIZE, threads=1):
    """Apply ``fn`` to fixed-size simulated blocks and return the results in block order.

    Block ``b`` draws from stream ``(seed, tag, b)``, so results depend only on
    ``(seed, tag, block_size)`` and not on ``threads``.
    """
    n_paths = int(n_paths)
    block_size = int(block_size)
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    sizes = [min(block_size, n_paths - start) for start in range(0, n_paths, block_size)]
    if not sizes:
        return [fn(simulate_chains(model, x0, N, 0, stream(seed, tag, 0)))]

    def run(b):
        return fn(simulate_chains(model, x0, N, sizes[b], stream(seed, tag, b)))

    if threads and threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, range(len(sizes))))
    return [run(b) for b in range(len(sizes))]


def simulate_chains_streamed(
    model, x0, N, n_paths, seed, tag, block_size=DEFAULT_BLOCK_SIZE, threads=1
):
    """Simulate in fixed-size blocks, block ``b`` drawing from stream ``(seed, tag, b)``."""
    blocks = map_blocks(model, x0, N, n_paths, seed, tag, lambda b: b, block_size, threads)
    return ChainBatch.concatenate(blocks)


def sup_rewards_streamed(model, x0, N, n_paths, seed, tag="sup", block_size=DEFAULT_BLOCK_SIZE, threads=1):
    """Per-path reward suprema up to ``T_N`` without holding all chains in memory."""
    parts = map_blocks(model, x0, N, n_paths, seed, tag, lambda b: sup_rewards(model, b), block_size, threads)
    return np.concatenate(parts)


def _segment_sups(model, starts, lengths):
    """``sup_{0 <= u <= length} g(flow(start, u))`` for each row."""
    if model.reward_monotone_along_flow:
        return np.asarray(model.reward(model.flow(starts, lengths)), dtype=float)
    m = starts.shape[0]
    frac = np.linspace(0.0, 1.0, _SUP_GRID_POINTS)
    nodes = lengths[:, None] * frac[None, :]
    xs = np.repeat(starts, _SUP_GRID_POINTS, axis=0)
    vals = np.asarray(model.reward(model.flow(xs, nodes.reshape(-1))), dtype=float)
    vals = vals.reshape(m, _SUP_GRID_POINTS)
    best = np.argmax(vals, axis=1)
    out = vals[np.arange(m), best]
    step = lengths / (_SUP_GRID_POINTS - 1)
    lo = np.maximum(nodes[np.arange(m), best] - step, 0.0)
    hi = np.minimum(nodes[np.arange(m), best] + step, lengths)

    def f(t):
        return np.asarray(model.reward(model.flow(starts, t)), dtype=float)

    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_phi * (hi - lo)
    d = lo + inv_phi * (hi - lo)
    fc, fd = f(c), f(d)
    while np.max(hi - lo, initial=0.0) > _GOLDEN_TOL:
        left = fc >= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c_new = hi - inv_phi * (hi - lo)
        d_new = lo + inv_phi * (hi - lo)
        c, d = c_new, d_new
        fc, fd = f(c), f(d)
    refined = f(0.5 * (lo + hi))
    return np.maximum(out, refined)


def sup_rewards(model, batch):
    """Supremum of the reward along each path of a batch up to ``T_N``.

    Covers every flow segment up to (and including the left limit at) each
    jump, plus the final post-jump state.
    """
    n, N1, d = batch.Z.shape
    N = N1 - 1
    best = np.asarray(model.reward(batch.Z[:, N, :]), dtype=float)
    if N == 0:
        return best
    starts = batch.Z[:, :N, :].reshape(-1, d)
    lengths = batch.S[:, 1:].reshape(-1)
    segs = _segment_sups(model, starts, lengths).reshape(n, N)
    return np.maximum(best, segs.max(axis=1))


def sup_reward_along_path(model, traj):
    """Supremum of the reward along one :class:`Trajectory`."""
    batch = ChainBatch(
        traj.post_jump_states[None, ...],
        traj.interjump_times[None, :],
        traj.boundary_forced[None, :],
    )
    return float(sup_rewards(model, batch)[0])


def _fmt(x):
    return repr(float(x))


def write_trajectories_csv(fh, batch):
    """Write one row per jump with header ``traj_id,k,Z,S,T,boundary_forced``.

    Multi-dimensional states are written as ``;``-separated components.
    """
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRAJECTORY_CSV_HEADER)
    T = batch.T
    for i in range(batch.n_paths):
        for k in range(batch.horizon + 1):
            z = ";".join(_fmt(c) for c in batch.Z[i, k])
            writer.writerow([i, k, z, _fmt(batch.S[i, k]), _fmt(T[i, k]), int(batch.forced[i, k])])
