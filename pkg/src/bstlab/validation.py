"""Input validation helpers used by the estimators and environments.

All numeric inputs are coerced to float64; shape problems raise
:class:`~bstlab.errors.DimensionError` with the offending name in the
message so callers see which argument was wrong.
"""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .errors import DimensionError

__all__ = [
    "as_matrix",
    "as_vector",
    "check_same_rows",
    "check_fitted",
    "check_in_unit_box",
]


def as_matrix(x, name: str, n_cols: int | None = None) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array; a 1-D input becomes one row."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got ndim={arr.ndim}")
    if n_cols is not None and arr.shape[1] != n_cols:
        raise DimensionError(
            f"{name} has {arr.shape[1]} columns, expected {n_cols}"
        )
    return arr


def as_vector(x, name: str, size: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got ndim={arr.ndim}")
    if size is not None and arr.shape[0] != size:
        raise DimensionError(f"{name} has length {arr.shape[0]}, expected {size}")
    return arr


def check_same_rows(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"{name_a} and {name_b} disagree on row count: "
            f"{a.shape[0]} vs {b.shape[0]}"
        )


def check_fitted(estimator, attributes: tuple[str, ...]) -> None:
    """Raise sklearn's NotFittedError unless all fitted attributes exist."""
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet "
            f"(missing {', '.join(missing)}); call fit first."
        )


def check_in_unit_box(actions: np.ndarray, name: str = "actions") -> None:
    """Actions live in [-1, 1] per component everywhere in this package."""
    if actions.size and (np.min(actions) < -1.0 or np.max(actions) > 1.0):
        raise ValueError(f"{name} must lie in [-1, 1] per component")
