"""Estimator wrapper around the full quantize / solve / stop pipeline."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dp import backward_solve
from .model import make_example_model
from .policy import apply_rule, build_policy, choose_beta, evaluate_rule, robust_mean
from .quantization import ChainQuantizer, estimate_errors, estimate_transition_weights, train_grids
from .simulation import ChainBatch
from .validation import check_chain_array, check_fraction, check_positive_int

__all__ = ["QuantizedStoppingSolver"]


class QuantizedStoppingSolver(BaseEstimator):
    """Approximate optimal stopping of a PDMP up to its ``N``-th jump.

    ``fit`` quantizes the jump chain, estimates transition weights and
    quantization errors, runs the backward recursion and builds the stopping
    rule.  ``predict`` returns stopping times for given chains and ``score``
    their mean reward.

    Parameters
    ----------
    model : PdmpModel, optional
        Defaults to the example model on ``[0, 1)``.
    x0 : float or array-like, default=0.0
    N : int, default=10
    points_per_stage : int, default=10
    train_samples, weight_samples, eval_samples : int, default=100000
    p : float, default=2.0
    component_weights : tuple, default=(1.0, 1.0)
    delta : float, default=0.151
        Requested time step of the decision grids.
    a : float, default=0.5
        Split parameter used to pick the offset ``beta``.
    beta : float, optional
        Fixed offset overriding the automatic choice.
    random_state : int, default=0
    threads : int, default=1

    Attributes
    ----------
    gridset_ : QuantizationGridSet
    values_ : ValueTable
    policy_ : StoppingPolicy
    V0_hat_ : float
    beta_ : float
    beta_feasible_ : bool
    """

    def __init__(
        self,
        model=None,
        x0=0.0,
        N=10,
        points_per_stage=10,
        train_samples=100_000,
        weight_samples=100_000,
        eval_samples=100_000,
        p=2.0,
        component_weights=(1.0, 1.0),
        delta=0.151,
        a=0.5,
        beta=None,
        random_state=0,
        threads=1,
    ):
        self.model = model
        self.x0 = x0
        self.N = N
        self.points_per_stage = points_per_stage
        self.train_samples = train_samples
        self.weight_samples = weight_samples
        self.eval_samples = eval_samples
        self.p = p
        self.component_weights = component_weights
        self.delta = delta
        self.a = a
        self.beta = beta
        self.random_state = random_state
        self.threads = threads

    def _model(self):
        return make_example_model() if self.model is None else self.model

    def fit(self, X=None, y=None):
        """Fit on simulated chains, or on ``X`` of shape ``(n, N + 1, d + 1)`` if given.

        Transition weights and errors always come from fresh simulated chains.
        """
        model = self._model()
        N = check_positive_int(self.N, "N")
        a = check_fraction(self.a)
        if not float(self.delta) > 0:
            raise ValueError("delta must be > 0")
        if X is None:
            grids = train_grids(
                model, self.x0, N, self.points_per_stage, self.train_samples, self.p,
                self.random_state, self.component_weights, threads=self.threads,
            )
        else:
            X = check_chain_array(X, model.state_dim)
            if X.shape[1] != N + 1:
                raise ValueError(f"X covers {X.shape[1] - 1} jumps, expected N={N}")
            q = ChainQuantizer(
                self.points_per_stage, self.p, self.component_weights, random_state=self.random_state
            ).fit(X)
            grids = q.to_gridset(model.tag, {"train_seed": self.random_state, "train_samples": len(X)})
        grids = estimate_transition_weights(model, grids, self.weight_samples, self.random_state, self.threads)
        estimate_errors(model, grids, self.eval_samples, self.p, self.random_state, self.threads)
        self.gridset_ = grids
        self.values_ = backward_solve(model, grids, self.delta)
        self.V0_hat_ = self.values_.V0_hat
        probe = build_policy(self.values_, grids, 0.0)
        beta, feasible = choose_beta(model.constants, grids.errors, a, probe.min_delta)
        if self.beta is not None:
            beta = float(self.beta)
            feasible = bool(beta / a < probe.min_delta)
        self.beta_, self.beta_feasible_ = beta, feasible
        self.policy_ = build_policy(self.values_, grids, beta, a)
        return self

    def _batch(self, X):
        check_is_fitted(self, "policy_")
        model = self._model()
        X = check_chain_array(X, model.state_dim)
        return ChainBatch(X[:, :, :-1], X[:, :, -1], np.zeros(X.shape[:2], dtype=bool))

    def predict(self, X):
        """Stopping times of the rule on each chain in ``X``."""
        batch = self._batch(X)
        return apply_rule(self._model(), self.policy_, batch).tau

    def predict_rewards(self, X):
        """Reward collected by the rule on each chain in ``X``."""
        batch = self._batch(X)
        return apply_rule(self._model(), self.policy_, batch).reward

    def score(self, X, y=None):
        """Mean reward of the rule on ``X``."""
        return robust_mean(self.predict_rewards(X))[0]

    def evaluate(self, n_mc=100_000, seed=None):
        """Monte-Carlo value of the rule and the empirical gap to the reward supremum."""
        check_is_fitted(self, "policy_")
        seed = self.random_state if seed is None else seed
        return evaluate_rule(self._model(), self.policy_, self.x0, n_mc, seed, self.threads)
