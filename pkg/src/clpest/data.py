"""The estimation input and its validation helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, EmptyData


def as_2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DataError(f"{name} must be 1- or 2-dimensional, got shape {a.shape}")
    return a


def check_arrays(y, X, W=None):
    """Validate and coerce outcome, treatment and control arrays.

    Returns ``(y, X, W)`` with ``y`` of shape ``(N,)``, ``X`` of shape
    ``(N, K)`` and ``W`` of shape ``(N, p)`` (``p`` may be zero).
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 1:
        raise DataError(f"outcome must be a vector, got shape {y.shape}")
    n = y.shape[0]
    if n == 0:
        raise EmptyData("no observations")
    X = as_2d(X, "treatments")
    W = np.empty((n, 0)) if W is None else as_2d(W, "controls")
    for name, a in (("treatments", X), ("controls", W)):
        if a.shape[0] != n:
            raise DataError(f"{name} has {a.shape[0]} rows, outcome has {n}")
    if X.shape[1] == 0:
        raise DataError("at least one treatment column is required")
    for name, a in (("outcome", y), ("treatments", X), ("controls", W)):
        if not np.all(np.isfinite(a)):
            raise DataError(f"{name} contains non-finite values")
    return y, X, W


@dataclass(frozen=True)
class Dataset:
    """Outcome ``y`` (N,), treatments ``X`` (N, K) and raw controls ``W`` (N, p)."""

    y: np.ndarray
    X: np.ndarray
    W: np.ndarray
    outcome_name: str = "y"
    treatment_names: tuple[str, ...] = field(default=())
    control_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        y, X, W = check_arrays(self.y, self.X, self.W)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W)
        if not self.treatment_names:
            names = ("x",) if X.shape[1] == 1 else tuple(f"x{k + 1}" for k in range(X.shape[1]))
            object.__setattr__(self, "treatment_names", names)
        if not self.control_names:
            names = ("w",) if W.shape[1] == 1 else tuple(f"w{j + 1}" for j in range(W.shape[1]))
            object.__setattr__(self, "control_names", names)
        if len(self.treatment_names) != X.shape[1] or len(self.control_names) != W.shape[1]:
            raise DataError("column names do not match array widths")

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.X.shape[1]

    def take(self, idx):
        return Dataset(
            self.y[idx], self.X[idx], self.W[idx],
            self.outcome_name, self.treatment_names, self.control_names,
        )


def one_hot(labels, n_categories=None):
    """Expand integer labels ``0..K`` into ``K`` indicator columns (category 0 is the base)."""
    labels = np.asarray(labels, dtype=float).ravel()
    if not np.all(labels == np.round(labels)) or np.any(labels < 0):
        raise DataError("category labels must be nonnegative integers")
    labels = labels.astype(int)
    k = int(labels.max()) if n_categories is None else n_categories
    out = np.zeros((labels.shape[0], k))
    rows = np.nonzero(labels > 0)[0]
    if np.any(labels > k):
        raise DataError(f"category label above {k}")
    out[rows, labels[rows] - 1] = 1.0
    return out
