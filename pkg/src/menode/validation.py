"""Input checks shared by the estimator facade and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def check_panel_array(X, name: str = "X") -> np.ndarray:
    """Coerce to a finite float64 (n_subjects, n_times, obs_dim) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ContractError(f"{name} must be (n_subjects, n_times, obs_dim), got shape {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 2 or X.shape[2] < 1:
        raise ContractError(f"{name} needs at least 1 subject, 2 times and 1 coordinate, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ContractError(f"{name} contains non-finite values")
    return X


def check_times(times, n_times: int) -> np.ndarray:
    times = np.asarray(times, dtype=np.float64)
    if times.shape != (n_times,):
        raise ContractError(f"times must have shape ({n_times},), got {times.shape}")
    if not np.all(np.isfinite(times)) or np.any(np.diff(times) <= 0):
        raise ContractError("times must be finite and strictly increasing")
    return times


def check_split_index(split_index: int, n_times: int) -> int:
    split_index = int(split_index)
    if not 0 < split_index < n_times:
        raise ContractError(
            f"split_index must lie strictly inside the grid (0, {n_times}), got {split_index}")
    return split_index
