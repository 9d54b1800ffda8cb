"""Input validation helpers shared by the estimators and the CLI."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array

__all__ = [
    "check_chain_array",
    "check_positive_int",
    "check_norm_order",
    "check_fraction",
    "check_component_weights",
]


def check_chain_array(X, state_dim=None, name="X"):
    """Validate a batch of chain samples of shape ``(n_samples, N + 1, state_dim + 1)``.

    The last axis holds the post-jump state followed by the inter-jump time.
    Inter-jump times must be nonnegative and the stage-0 time must be zero.
    """
    X = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64, input_name=name)
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (n_samples, N + 1, state_dim + 1), got {X.shape}")
    if X.shape[1] < 2:
        raise ValueError(f"{name} must cover at least one jump")
    if X.shape[2] < 2:
        raise ValueError(f"{name} needs at least one state column and a time column")
    if state_dim is not None and X.shape[2] != state_dim + 1:
        raise ValueError(f"{name} has state dimension {X.shape[2] - 1}, expected {state_dim}")
    if np.any(X[:, :, -1] < 0):
        raise ValueError(f"{name} contains negative inter-jump times")
    if np.any(X[:, 0, -1] != 0):
        raise ValueError(f"{name} must have S_0 = 0")
    return X


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_norm_order(p):
    p = float(p)
    if not p >= 1:
        raise ValueError(f"norm order p must be >= 1, got {p}")
    return p


def check_fraction(a, name="a"):
    a = float(a)
    if not 0 < a < 1:
        raise ValueError(f"{name} must lie in (0, 1), got {a}")
    return a


def check_component_weights(weights):
    w = tuple(float(c) for c in weights)
    if len(w) != 2 or any(not c > 0 for c in w):
        raise ValueError(f"component_weights must be two positive numbers, got {weights!r}")
    return w
