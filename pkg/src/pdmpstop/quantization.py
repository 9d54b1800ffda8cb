"""Per-stage quantization of the chain ``Theta_n = (Z_n, S_n)``.

Codebooks are trained by batch Lloyd iterations seeded with k-means++, and
nearest-neighbour projection breaks exact distance ties towards the smallest
codebook index.  Rows of the quantized transition law are keyed by the
z-component of the previous stage's codebook point: two points sharing their
z-component share one row.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import stream
from .exceptions import AbsentRowError, GridFileError, SchemaVersionError
from .simulation import simulate_chains_streamed
from .validation import (
    check_chain_array,
    check_component_weights,
    check_norm_order,
    check_positive_int,
)

__all__ = [
    "StageGrid",
    "QuantizationGridSet",
    "ChainQuantizer",
    "project",
    "nearest_indices",
    "lloyd",
    "train_grids",
    "estimate_transition_weights",
    "estimate_errors",
    "save_grids",
    "load_grids",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
TIE_RTOL = 1e-12
ROW_SUM_TOL = 1e-9


def _scale(d, component_weights):
    w_z, w_s = component_weights
    return np.r_[np.full(d, w_z), w_s]


def _pnorm_rows(diff, p):
    a = np.abs(diff)
    if np.isinf(p):
        return a.max(axis=-1)
    if p == 2:
        return np.sqrt((a * a).sum(axis=-1))
    return (a**p).sum(axis=-1) ** (1.0 / p)


def _brute_nearest(codebook, points, p):
    out = np.empty(len(points), dtype=np.intp)
    chunk = max(1, 2**20 // max(1, len(codebook)))
    for start in range(0, len(points), chunk):
        block = points[start : start + chunk]
        dist = _pnorm_rows(block[:, None, :] - codebook[None, :, :], p)
        dmin = dist.min(axis=1, keepdims=True)
        tied = dist <= dmin + TIE_RTOL * np.maximum(1.0, dmin)
        out[start : start + chunk] = np.argmax(tied, axis=1)
    return out


def nearest_indices(codebook, points, p=2.0, component_weights=(1.0, 1.0)):
    """Index of the nearest codebook row for every point.

    Distances are p-norms after scaling the state components by
    ``component_weights[0]`` and the time component by ``component_weights[1]``.
    Distances equal up to a relative ``1e-12`` count as ties and go to the
    smallest index.
    """
    codebook = np.asarray(codebook, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    scale = _scale(codebook.shape[1] - 1, component_weights)
    C = codebook * scale
    P = points * scale
    if len(C) == 1:
        return np.zeros(len(P), dtype=np.intp)
    dist, idx = cKDTree(C).query(P, k=2, p=p)
    out = idx[:, 0].astype(np.intp)
    near_tie = dist[:, 1] - dist[:, 0] <= 1e-9 * np.maximum(1.0, dist[:, 1])
    if np.any(near_tie):
        out[near_tie] = _brute_nearest(C, P[near_tie], p)
    return out


@dataclass
class StageGrid:
    """Codebook of one stage.

    ``codebook`` rows are ``(z_1, ..., z_d, s)`` sorted lexicographically;
    ``z_class[i]`` is the index into ``z_values`` of row ``i``'s state part.
    """

    stage: int
    codebook: np.ndarray
    weights: np.ndarray
    z_class: np.ndarray = field(default=None)
    z_values: np.ndarray = field(default=None)

    def __post_init__(self):
        self.codebook = np.asarray(self.codebook, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.z_class is None or self.z_values is None:
            z_values, z_class = np.unique(self.codebook[:, :-1], axis=0, return_inverse=True)
            self.z_values = z_values
            self.z_class = np.asarray(z_class, dtype=np.intp).reshape(-1)
        else:
            self.z_values = np.asarray(self.z_values, dtype=float)
            self.z_class = np.asarray(self.z_class, dtype=np.intp)

    @property
    def size(self):
        return len(self.codebook)

    @property
    def n_classes(self):
        return len(self.z_values)

    @property
    def z_projection(self):
        return self.codebook[:, :-1]

    @property
    def s_values(self):
        return self.codebook[:, -1]


def project(grid, point, p=2.0, component_weights=(1.0, 1.0)):
    """Codebook index of the nearest neighbour of a single ``(state, time)`` point."""
    point = np.asarray(point, dtype=float).reshape(1, -1)
    return int(nearest_indices(grid.codebook, point, p, component_weights)[0])


def _kmeans_pp(X, k, rng, p):
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centers[0] = X[first]
    pot = _pnorm_rows(X - X[first], p) ** p
    for i in range(1, k):
        cum = np.cumsum(pot)
        total = cum[-1]
        j = int(np.searchsorted(cum, rng.random() * total, side="right"))
        j = min(j, n - 1)
        centers[i] = X[j]
        pot = np.minimum(pot, _pnorm_rows(X - X[j], p) ** p)
    return centers


def lloyd(X, k, rng, p=2.0, max_iter=50, tol=1e-6):
    """Batch Lloyd iterations from a k-means++ start.

    Returns ``(centers, distortions, n_iter, degenerate)``.  ``distortions``
    holds the mean ``p``-th power distance after each assignment step; with
    ``p == 2`` it is nonincreasing.  When ``X`` has fewer than ``k`` distinct
    rows the centers are that distinct support and ``degenerate`` is True.
    """
    X = np.asarray(X, dtype=float)
    support = np.unique(X, axis=0)
    if len(support) <= k:
        return support, [0.0], 0, len(support) < k
    centers = _kmeans_pp(X, k, rng, p)
    history = []
    n_iter = 0
    for _ in range(max_iter):
        dist, labels = cKDTree(centers).query(X, k=1, p=p)
        distortion = float(np.mean(dist**p))
        history.append(distortion)
        if len(history) > 1:
            prev = history[-2]
            if prev <= 0 or (prev - distortion) <= tol * prev:
                break
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        for c in range(X.shape[1]):
            sums = np.bincount(labels, weights=X[:, c], minlength=k)
            centers[filled, c] = sums[filled] / counts[filled]
        n_iter += 1
    else:
        dist, _ = cKDTree(centers).query(X, k=1, p=p)
        history.append(float(np.mean(dist**p)))
    return centers, history, n_iter, False


@dataclass(eq=False)
class QuantizationGridSet:
    """Codebooks for stages ``0..N`` plus the quantized transition law.

    Attributes
    ----------
    grids : list of StageGrid
    transitions : list
        ``transitions[k]`` for ``k >= 1`` is an array of shape
        ``(grids[k - 1].n_classes, grids[k].size)``; row ``i`` estimates
        ``P(Theta_hat_k = point_j | Z_hat_{k-1} = z_values[i])``.  Unvisited rows
        are all zero.  ``transitions[0]`` is None.
    visits : list
        Source-class visit counts matching ``transitions``.
    errors : dict
        ``e_Z``, ``e_S``, ``e_Theta`` arrays over stages.
    """

    grids: list
    p: float = 2.0
    component_weights: tuple = (1.0, 1.0)
    model_tag: str = "user"
    transitions: list = None
    visits: list = None
    errors: dict = None
    manifest: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.grids) - 1

    @property
    def state_dim(self):
        return self.grids[0].codebook.shape[1] - 1

    @property
    def has_transitions(self):
        return self.transitions is not None

    @property
    def qe(self):
        return float(np.max(self.errors["e_Theta"]))

    def project(self, n, points):
        """Vectorized nearest-neighbour projection onto the stage-``n`` codebook."""
        return nearest_indices(self.grids[n].codebook, points, self.p, self.component_weights)

    def reachable(self, n):
        """Mask over stage-``n`` z-classes visited by the weight samples."""
        if n < self.N:
            return self.visits[n + 1] > 0
        incoming = self.transitions[n].sum(axis=0) > 0
        out = np.zeros(self.grids[n].n_classes, dtype=bool)
        out[self.grids[n].z_class[incoming]] = True
        return out

    def row(self, k, cls):
        """Transition row from stage-``k - 1`` z-class ``cls`` into stage ``k``."""
        if not self.has_transitions:
            raise AbsentRowError("transition weights have not been estimated")
        if not 0 <= cls < len(self.visits[k]):
            raise AbsentRowError(f"stage {k - 1} has no z-class {cls}")
        if self.visits[k][cls] == 0:
            raise AbsentRowError(f"stage {k - 1} z-class {cls} was never visited")
        return self.transitions[k][cls]

    def to_dict(self):
        stages = []
        for n, g in enumerate(self.grids):
            entry = {
                "stage": n,
                "codebook": g.codebook.tolist(),
                "weights": g.weights.tolist(),
                "z_class": g.z_class.tolist(),
            }
            if self.has_transitions and n >= 1:
                rows = []
                for i in range(self.transitions[n].shape[0]):
                    if self.visits[n][i] == 0:
                        continue
                    cols = np.flatnonzero(self.transitions[n][i])
                    rows.append(
                        {
                            "z_class": i,
                            "visits": int(self.visits[n][i]),
                            "cols": cols.tolist(),
                            "probs": self.transitions[n][i, cols].tolist(),
                        }
                    )
                entry["transitions"] = rows
            stages.append(entry)
        errors = None
        if self.errors is not None:
            errors = {
                key: (np.asarray(val).tolist() if key in ("e_Z", "e_S", "e_Theta") else val)
                for key, val in self.errors.items()
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "model_tag": self.model_tag,
            "N": self.N,
            "p": self.p,
            "component_weights": list(self.component_weights),
            "stages": stages,
            "errors": errors,
            "manifest": self.manifest,
        }

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict) or "schema_version" not in doc:
            raise GridFileError("not a grid document")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"unsupported schema_version {doc['schema_version']!r} (expected {SCHEMA_VERSION})"
            )
        try:
            grids = []
            for n, entry in enumerate(doc["stages"]):
                codebook = np.asarray(entry["codebook"], dtype=float)
                if codebook.ndim != 2:
                    raise GridFileError(f"stage {n}: codebook must be a list of rows")
                grids.append(StageGrid(n, codebook, np.asarray(entry["weights"], dtype=float)))
                if not np.array_equal(grids[-1].z_class, np.asarray(entry["z_class"])):
                    raise GridFileError(f"stage {n}: z_class does not match the codebook")
            transitions = visits = None
            if len(doc["stages"]) > 1 and "transitions" in doc["stages"][1]:
                transitions, visits = [None], [None]
                for k in range(1, len(grids)):
                    mat = np.zeros((grids[k - 1].n_classes, grids[k].size))
                    vis = np.zeros(grids[k - 1].n_classes, dtype=np.int64)
                    for row in doc["stages"][k]["transitions"]:
                        i = int(row["z_class"])
                        mat[i, np.asarray(row["cols"], dtype=np.intp)] = row["probs"]
                        vis[i] = int(row["visits"])
                        total = mat[i].sum()
                        if abs(total - 1.0) > ROW_SUM_TOL or np.any(mat[i] < 0):
                            raise GridFileError(
                                f"stage {k} transition row z_class={i} sums to {total!r}, not 1"
                            )
                    transitions.append(mat)
                    visits.append(vis)
            errors = doc.get("errors")
            if errors is not None:
                errors = {
                    key: (np.asarray(val, dtype=float) if key in ("e_Z", "e_S", "e_Theta") else val)
                    for key, val in errors.items()
                }
            return cls(
                grids=grids,
                p=float(doc["p"]),
                component_weights=tuple(float(c) for c in doc["component_weights"]),
                model_tag=doc["model_tag"],
                transitions=transitions,
                visits=visits,
                errors=errors,
                manifest=doc.get("manifest", {}),
            )
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            if isinstance(exc, GridFileError):
                raise
            raise GridFileError(f"malformed grid document: {exc}") from exc

    def __eq__(self, other):
        if not isinstance(other, QuantizationGridSet):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def save_grids(grids, fh):
    """Serialize a grid set as one JSON document (shortest round-trip floats)."""
    json.dump(grids.to_dict(), fh, allow_nan=False)


def load_grids(fh):
    """Inverse of :func:`save_grids`.

    Raises
    ------
    GridFileError
        Truncated or malformed input, or a transition row not summing to 1.
    SchemaVersionError
        Unsupported ``schema_version``.
    """
    try:
        doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GridFileError(f"malformed grid file: {exc}") from exc
    return QuantizationGridSet.from_dict(doc)


class ChainQuantizer(TransformerMixin, BaseEstimator):
    """Stage-wise vector quantizer for sampled chains.

    ``fit`` takes chain samples of shape ``(n_samples, N + 1, state_dim + 1)``
    and learns one codebook per stage; ``transform`` maps samples to codebook
    indices.

    Parameters
    ----------
    n_points : int, default=10
        Codebook size for stages ``1..N``.  Stage 0 is the sample support
        (a single point for a deterministic start).
    p : float, default=2.0
        Norm order for distances and error estimates.
    component_weights : tuple, default=(1.0, 1.0)
        Scaling of the state and time components in the distance.
    max_iter : int, default=50
    tol : float, default=1e-6
        Relative distortion change that stops the Lloyd iterations.
    random_state : int, default=0
        Master seed; stage ``n`` initializes from stream
        ``(random_state, "lloyd-init", n)``.
    """

    def __init__(self, n_points=10, p=2.0, component_weights=(1.0, 1.0), max_iter=50, tol=1e-6, random_state=0):
        self.n_points = n_points
        self.p = p
        self.component_weights = component_weights
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_chain_array(X)
        k = check_positive_int(self.n_points, "n_points")
        p = check_norm_order(self.p)
        weights = check_component_weights(self.component_weights)
        scale = _scale(X.shape[2] - 1, weights)
        self.grids_ = []
        self.distortion_history_ = []
        self.n_iter_ = []
        self.degenerate_stages_ = []
        for n in range(X.shape[1]):
            cloud = X[:, n, :] * scale
            centers, history, n_iter, degenerate = lloyd(
                cloud, k, stream(self.random_state, "lloyd-init", n), p, self.max_iter, self.tol
            )
            if degenerate and n > 0:
                self.degenerate_stages_.append(n)
                warnings.warn(
                    f"stage {n}: only {len(centers)} distinct samples for {k} points; "
                    "codebook truncated to the support",
                    RuntimeWarning,
                    stacklevel=2,
                )
            codebook = np.unique(centers / scale, axis=0)
            idx = nearest_indices(codebook, X[:, n, :], p, weights)
            w = np.bincount(idx, minlength=len(codebook)) / len(idx)
            self.grids_.append(StageGrid(n, codebook, w))
            self.distortion_history_.append(history)
            self.n_iter_.append(n_iter)
        self.horizon_ = X.shape[1] - 1
        self.state_dim_ = X.shape[2] - 1
        return self

    def transform(self, X):
        """Codebook index of every ``(Z_n, S_n)`` sample, shape ``(n_samples, N + 1)``."""
        check_is_fitted(self, "grids_")
        X = check_chain_array(X, self.state_dim_)
        if X.shape[1] != self.horizon_ + 1:
            raise ValueError(f"expected {self.horizon_ + 1} stages, got {X.shape[1]}")
        weights = check_component_weights(self.component_weights)
        return np.column_stack(
            [
                nearest_indices(g.codebook, X[:, n, :], self.p, weights)
                for n, g in enumerate(self.grids_)
            ]
        )

    def transition_counts(self, X):
        """Visit counts and pair counts ``(z-class at k-1, point at k)`` per stage."""
        idx = self.transform(X)
        counts, visits = [None], [None]
        for k in range(1, self.horizon_ + 1):
            prev, cur = self.grids_[k - 1], self.grids_[k]
            src = prev.z_class[idx[:, k - 1]]
            pair = np.bincount(src * cur.size + idx[:, k], minlength=prev.n_classes * cur.size)
            pair = pair.reshape(prev.n_classes, cur.size)
            counts.append(pair)
            visits.append(pair.sum(axis=1))
        return idx, counts, visits

    def quantization_errors(self, X):
        """Monte-Carlo ``L^p`` distances ``e_Z``, ``e_S``, ``e_Theta`` per stage."""
        idx = self.transform(X)
        X = check_chain_array(X, self.state_dim_)
        p = float(self.p)
        e_z, e_s, e_t = [], [], []
        for n, g in enumerate(self.grids_):
            diff = X[:, n, :] - g.codebook[idx[:, n]]
            e_z.append(_lp_norm(_pnorm_rows(diff[:, :-1], p), p))
            e_s.append(_lp_norm(np.abs(diff[:, -1]), p))
            e_t.append(_lp_norm(_pnorm_rows(diff, p), p))
        return {"e_Z": np.array(e_z), "e_S": np.array(e_s), "e_Theta": np.array(e_t)}

    def to_gridset(self, model_tag="user", manifest=None):
        check_is_fitted(self, "grids_")
        return QuantizationGridSet(
            grids=[StageGrid(g.stage, g.codebook.copy(), g.weights.copy()) for g in self.grids_],
            p=float(self.p),
            component_weights=check_component_weights(self.component_weights),
            model_tag=model_tag,
            manifest=dict(manifest or {}),
        )

    @classmethod
    def from_gridset(cls, grids):
        """Rebuild a fitted quantizer around an existing grid set."""
        q = cls(n_points=max(g.size for g in grids.grids), p=grids.p, component_weights=grids.component_weights)
        q.grids_ = grids.grids
        q.horizon_ = grids.N
        q.state_dim_ = grids.state_dim
        q.distortion_history_ = []
        q.n_iter_ = []
        q.degenerate_stages_ = []
        return q


def _lp_norm(values, p):
    if np.isinf(p):
        return float(np.max(values, initial=0.0))
    return float(np.mean(values**p) ** (1.0 / p))


def train_grids(
    model,
    x0,
    N,
    points_per_stage,
    train_samples,
    p=2.0,
    seed=0,
    component_weights=(1.0, 1.0),
    max_iter=50,
    tol=1e-6,
    threads=1,
):
    """Simulate ``train_samples`` chains from stream tag ``"train"`` and fit codebooks."""
    points_per_stage = check_positive_int(points_per_stage, "points_per_stage")
    train_samples = check_positive_int(train_samples, "train_samples")
    if train_samples < 100 * points_per_stage:
        raise ValueError("train_samples must be >= 100 * points_per_stage")
    chains = simulate_chains_streamed(model, x0, N, train_samples, seed, "train", threads=threads)
    X = _chain_array(chains)
    q = ChainQuantizer(points_per_stage, p, component_weights, max_iter, tol, random_state=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        q.fit(X)
    manifest = {
        "train_seed": int(seed),
        "train_samples": train_samples,
        "points_per_stage": points_per_stage,
        "lloyd_iterations": list(q.n_iter_),
        "final_distortion": [h[-1] for h in q.distortion_history_],
        "degenerate_stages": list(q.degenerate_stages_),
        "warnings": [str(w.message) for w in caught],
    }
    grids = q.to_gridset(model.tag, manifest)
    grids.manifest["distortion_history"] = [list(h) for h in q.distortion_history_]
    return grids


def _chain_array(chains):
    return np.concatenate([chains.Z, chains.S[:, :, None]], axis=2)


def estimate_transition_weights(model, grids, weight_samples, seed=0, threads=1):
    """Fill transition rows and marginal weights from fresh chains (tag ``"weights"``)."""
    weight_samples = check_positive_int(weight_samples, "weight_samples")
    x0 = grids.grids[0].codebook[0, :-1]
    chains = simulate_chains_streamed(model, x0, grids.N, weight_samples, seed, "weights", threads=threads)
    q = ChainQuantizer.from_gridset(grids)
    idx, counts, visits = q.transition_counts(_chain_array(chains))
    transitions = [None]
    for k in range(1, grids.N + 1):
        c = counts[k].astype(float)
        rows = visits[k]
        mat = np.zeros_like(c)
        ok = rows > 0
        mat[ok] = c[ok] / rows[ok, None]
        transitions.append(mat)
    new_grids = [
        StageGrid(g.stage, g.codebook, np.bincount(idx[:, n], minlength=g.size) / weight_samples)
        for n, g in enumerate(grids.grids)
    ]
    manifest = dict(grids.manifest)
    manifest.update({"weight_seed": int(seed), "weight_samples": weight_samples})
    return QuantizationGridSet(
        grids=new_grids,
        p=grids.p,
        component_weights=grids.component_weights,
        model_tag=grids.model_tag,
        transitions=transitions,
        visits=[None] + [v.astype(np.int64) for v in visits[1:]],
        errors=grids.errors,
        manifest=manifest,
    )


def estimate_errors(model, grids, eval_samples, p=None, seed=0, threads=1):
    """Monte-Carlo quantization errors per stage from fresh chains (tag ``"errors"``).

    Returns the error table (also stored on ``grids.errors``) with keys
    ``e_Z``, ``e_S``, ``e_Theta``, ``QE`` and ``samples``.
    """
    eval_samples = check_positive_int(eval_samples, "eval_samples")
    x0 = grids.grids[0].codebook[0, :-1]
    chains = simulate_chains_streamed(model, x0, grids.N, eval_samples, seed, "errors", threads=threads)
    q = ChainQuantizer.from_gridset(grids)
    if p is not None:
        q.p = check_norm_order(p)
    table = q.quantization_errors(_chain_array(chains))
    table["QE"] = float(np.max(table["e_Theta"]))
    table["samples"] = eval_samples
    table["p"] = float(q.p)
    grids.errors = table
    grids.manifest.update({"error_seed": int(seed), "eval_samples": eval_samples})
    return table
