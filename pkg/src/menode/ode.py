"""Fixed-step ODE integration plus the stochastic reference solvers.

The deterministic integrator runs on :class:`~menode.autodiff.Tensor`
states so an enclosing tape differentiates straight through the
unrolled steps (discretize-then-differentiate; there is no adjoint
pass). The Stratonovich and frozen-noise ensemble solvers are plain
numpy: they exist as numerical references and are never trained
through.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DivergenceError

METHODS = ("euler", "rk4")

# drift(z, w, t) -> dz/dt, all tensor-valued except the time
DriftFn = Callable[[Tensor, Tensor, float], Tensor]


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times plus a substep count.

    Integration takes ``substeps`` equal steps between consecutive
    observation times; only states at the observation times are kept.
    """

    times: np.ndarray
    substeps: int = 3

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.ndim != 1 or times.size < 1:
            raise ContractError(f"TimeGrid: times must be a non-empty 1-D array, got shape {times.shape}")
        if not np.all(np.isfinite(times)):
            raise ContractError("TimeGrid: times must be finite")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ContractError("TimeGrid: times must be strictly increasing")
        if int(self.substeps) < 1:
            raise ContractError(f"TimeGrid: substeps must be >= 1, got {self.substeps}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "substeps", int(self.substeps))

    def __len__(self):
        return self.times.size


@dataclass
class Trajectory:
    """States recorded at the grid times; ``states[0]`` is the initial state object."""

    times: np.ndarray
    states: list

    @property
    def values(self) -> np.ndarray:
        """Stacked state values, shape (n_times, *state_shape)."""
        return np.stack([s.values for s in self.states])


def _check_finite(z: Tensor, t: float):
    if not np.all(np.isfinite(z.values)):
        raise DivergenceError("integration produced a non-finite state", time=t)


def _step_euler(drift: DriftFn, z: Tensor, w: Tensor, t: float, h: float) -> Tensor:
    return ad.add(z, ad.scale(drift(z, w, t), h))


def _step_rk4(drift: DriftFn, z: Tensor, w: Tensor, t: float, h: float) -> Tensor:
    k1 = drift(z, w, t)
    k2 = drift(ad.add(z, ad.scale(k1, 0.5 * h)), w, t + 0.5 * h)
    k3 = drift(ad.add(z, ad.scale(k2, 0.5 * h)), w, t + 0.5 * h)
    k4 = drift(ad.add(z, ad.scale(k3, h)), w, t + h)
    incr = ad.add(ad.add(k1, ad.scale(k2, 2.0)), ad.add(ad.scale(k3, 2.0), k4))
    return ad.add(z, ad.scale(incr, h / 6.0))


def integrate(drift: DriftFn, z0: Tensor, w: Tensor, grid: TimeGrid, method: str = "rk4",
              check_finite: bool = True) -> Trajectory:
    """Roll the initial state through the grid; the first recorded state is ``z0`` itself.

    Differentiable in ``z0``, ``w`` and anything the drift closes over,
    provided those tensors sit on a live tape. Raises
    :class:`DivergenceError` the moment a substep goes non-finite, unless
    ``check_finite`` is off (batched candidate scans mask bad rows instead).
    """
    if method not in METHODS:
        raise ContractError(f"integrate: unknown method {method!r}, expected one of {METHODS}")
    step = _step_rk4 if method == "rk4" else _step_euler
    times = grid.times
    states = [z0]
    z = z0
    for k in range(times.size - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        h = (t1 - t0) / grid.substeps
        t = t0
        for _ in range(grid.substeps):
            z = step(drift, z, w, t, h)
            t += h
            if check_finite:
                _check_finite(z, t)
        states.append(z)
    return Trajectory(times=times.copy(), states=states)


def integrate_stratonovich(
    f: Callable[[np.ndarray, float], np.ndarray],
    noise_coeff: Callable[[np.ndarray, float], np.ndarray],
    z0: float,
    grid: TimeGrid,
    seed: int,
    n_paths: int = 1,
) -> np.ndarray:
    """Euler-Heun sample paths of dz = f dt + noise_coeff o dW, scalar state.

    Predictor-corrector stepping (Rumelin 1982): the predictor takes a
    plain Euler-Maruyama step, the corrector averages drift and noise
    coefficient between the two endpoints, which lands on the
    Stratonovich solution. Returns the paths at the grid times, shape
    (n_paths, n_times). Not differentiable by design.
    """
    if n_paths < 1:
        raise ContractError(f"integrate_stratonovich: n_paths must be >= 1, got {n_paths}")
    rng = np.random.default_rng(seed)
    times = grid.times
    out = np.empty((n_paths, times.size), dtype=np.float64)
    z = np.full(n_paths, float(z0))
    out[:, 0] = z
    for k in range(times.size - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        h = (t1 - t0) / grid.substeps
        sqrt_h = np.sqrt(h)
        t = t0
        for _ in range(grid.substeps):
            dw = rng.standard_normal(n_paths) * sqrt_h
            fz = f(z, t)
            gz = noise_coeff(z, t)
            z_pred = z + fz * h + gz * dw
            z = z + 0.5 * (fz + f(z_pred, t + h)) * h + 0.5 * (gz + noise_coeff(z_pred, t + h)) * dw
            t += h
        out[:, k + 1] = z
    return out


@dataclass
class EnsembleMoments:
    """Per-time mean/variance of an ensemble, with diverged paths excluded."""

    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    n_paths: int
    n_diverged: int
    diverged: np.ndarray = field(repr=False)  # boolean mask over paths


_DIVERGENCE_CAP = 1e100


def wong_zakai_ensemble(
    f: Callable[[np.ndarray, float], np.ndarray],
    noise_coeff: Callable[[np.ndarray, float], np.ndarray],
    z0: float,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    method: str = "rk4",
) -> EnsembleMoments:
    """Frozen-noise ensemble: draw one N(0,1) amplitude per path, solve the ODE
    dz/dt = f(z,t) + noise_coeff(z,t) * b, and average across paths.

    Paths that leave the finite range are flagged, excluded from the
    moments and counted, never silently averaged in.
    """
    if n_paths < 2:
        raise ContractError(f"wong_zakai_ensemble: n_paths must be >= 2, got {n_paths}")
    if method not in METHODS:
        raise ContractError(f"wong_zakai_ensemble: unknown method {method!r}")
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(n_paths)
    times = grid.times
    z = np.full(n_paths, float(z0))
    path_values = np.empty((times.size, n_paths), dtype=np.float64)
    path_values[0] = z
    alive = np.ones(n_paths, dtype=bool)

    def fb(state, t):
        return f(state, t) + noise_coeff(state, t) * b

    for k in range(times.size - 1):
        t0, t1 = float(times[k]), float(times[k + 1])
        h = (t1 - t0) / grid.substeps
        t = t0
        for _ in range(grid.substeps):
            with np.errstate(over="ignore", invalid="ignore"):
                if method == "rk4":
                    k1 = fb(z, t)
                    k2 = fb(z + 0.5 * h * k1, t + 0.5 * h)
                    k3 = fb(z + 0.5 * h * k2, t + 0.5 * h)
                    k4 = fb(z + h * k3, t + h)
                    z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                else:
                    z = z + h * fb(z, t)
            t += h
            bad = ~np.isfinite(z) | (np.abs(z) > _DIVERGENCE_CAP)
            if bad.any():
                alive &= ~bad
                z = np.where(bad, 0.0, z)  # park dead paths; they are masked out below
        path_values[k + 1] = z

    n_alive = int(alive.sum())
    if n_alive < 2:
        raise DivergenceError("wong_zakai_ensemble: fewer than two paths survived")
    live = path_values[:, alive]
    return EnsembleMoments(
        times=times.copy(),
        mean=live.mean(axis=1),
        var=live.var(axis=1, ddof=1),
        n_paths=n_paths,
        n_diverged=n_paths - n_alive,
        diverged=~alive,
    )
