"""Test-time personalization by candidate search over the learned effect.

Calibration receives only the observed window of a subject: it fixes
the initial latent state at the posterior mean, draws candidate effects
from the learned q(w), and keeps the one whose decoded trajectory is
closest to the window. Prediction then rolls that single choice over a
longer grid. The uncalibrated baseline averages posterior draws with no
selection at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, DivergenceError
from .model import MeNodeModel, _check_window
from .ode import TimeGrid, integrate


@dataclass
class CalibrationResult:
    """Chosen effect for one subject plus the candidate-score summary."""

    w: np.ndarray            # (mixed_dim,)
    mse: float               # decoded MSE of the chosen candidate (the minimum)
    n_candidates: int
    mse_min: float
    mse_median: float
    mse_max: float


@dataclass
class EnsemblePrediction:
    """Pointwise moments of posterior-sample rollouts, diverged draws excluded."""

    mean: np.ndarray  # (n_times, obs_dim)
    std: np.ndarray   # (n_times, obs_dim)
    n_samples: int
    n_diverged: int


def _rollout_values(model: MeNodeModel, z0_rows: np.ndarray, w_rows: np.ndarray,
                    grid: TimeGrid) -> np.ndarray:
    """Decoded trajectories for a batch of (z0, w) rows, shape (rows, n_times, d)."""
    with np.errstate(over="ignore", invalid="ignore"):
        traj = integrate(model.drift_rows, Tensor(z0_rows), Tensor(w_rows), grid,
                         method=model.config.method, check_finite=False)
        decoded = [model.decode_rows(state).values for state in traj.states]
    return np.stack(decoded, axis=1)


def _posterior_mean_z0(model: MeNodeModel, x_obs: np.ndarray) -> np.ndarray:
    mu, _ = model.encode_rows(Tensor(x_obs.reshape(1, -1)))
    return mu.values[0]


def calibrate_batch(model: MeNodeModel, x_obs: np.ndarray, grid_obs: TimeGrid,
                    n_candidates: int = 256, seed: int = 0, search_z0: bool = False):
    """Vectorized calibration for (B, n_obs_times, obs_dim) windows.

    One shared candidate draw is scored against every subject; returns a
    list of :class:`CalibrationResult` in subject order. ``search_z0``
    additionally samples the initial state around its posterior instead
    of pinning it at the mean (off by default).
    """
    if n_candidates < 1:
        raise ContractError(f"calibrate: n_candidates must be >= 1, got {n_candidates}")
    cfg = model.config
    x_obs = np.asarray(x_obs, dtype=np.float64)
    if x_obs.ndim != 3 or x_obs.shape[1:] != (cfg.n_obs_times, cfg.obs_dim):
        raise ContractError(
            f"calibrate: windows must be (B, {cfg.n_obs_times}, {cfg.obs_dim}), got {x_obs.shape}")
    n_subjects = x_obs.shape[0]
    rng = np.random.default_rng(seed)
    beta = model.posterior.beta.values
    sigma_b = np.exp(model.posterior.log_sigma_b.values)
    w_cand = beta[None, None, :] + sigma_b[None, None, :] * rng.standard_normal(
        (n_subjects, n_candidates, cfg.mixed_dim))

    mu, sigma = model.encode_rows(Tensor(x_obs.reshape(n_subjects, -1)))
    z0_rows = np.repeat(mu.values, n_candidates, axis=0)
    if search_z0:
        noise = rng.standard_normal((n_subjects, n_candidates, cfg.latent_dim))
        z0_rows = z0_rows + (sigma.values[:, None, :] * noise).reshape(-1, cfg.latent_dim)

    pred = _rollout_values(model, z0_rows, w_cand.reshape(-1, cfg.mixed_dim), grid_obs)
    pred = pred.reshape(n_subjects, n_candidates, cfg.n_obs_times, cfg.obs_dim)
    with np.errstate(over="ignore", invalid="ignore"):
        mse = ((pred - x_obs[:, None, :, :]) ** 2).mean(axis=(2, 3))
    mse = np.where(np.isfinite(mse), mse, np.inf)

    results = []
    for b in range(n_subjects):
        scores = mse[b]
        best = int(np.argmin(scores))
        if not np.isfinite(scores[best]):
            raise DivergenceError("calibrate: every candidate diverged")
        finite = scores[np.isfinite(scores)]
        results.append(CalibrationResult(
            w=w_cand[b, best].copy(),
            mse=float(scores[best]),
            n_candidates=n_candidates,
            mse_min=float(finite.min()),
            mse_median=float(np.median(finite)),
            mse_max=float(finite.max()),
        ))
    return results


def calibrate(model: MeNodeModel, x_obs, grid_obs: TimeGrid, n_candidates: int = 256,
              seed: int = 0, search_z0: bool = False) -> CalibrationResult:
    """Pick the effect whose rollout best matches one subject's observed window."""
    x = _check_window(model, x_obs)
    return calibrate_batch(model, x[None], grid_obs, n_candidates=n_candidates,
                           seed=seed, search_z0=search_z0)[0]


def _check_extends(grid_obs_times: np.ndarray, grid_full: TimeGrid, n_obs: int):
    if grid_full.times.size < n_obs or not np.array_equal(grid_full.times[:n_obs], grid_obs_times):
        raise ContractError("predict: the full grid must extend the observed grid")


def predict(model: MeNodeModel, calibration: CalibrationResult, x_obs, grid_obs: TimeGrid,
            grid_full: TimeGrid) -> np.ndarray:
    """Decoded rollout of the calibrated effect over ``grid_full``, shape (n_times, d).

    Receives the observed window only; the extrapolation part of the
    grid carries no data through this interface at all.
    """
    x = _check_window(model, x_obs)
    _check_extends(grid_obs.times, grid_full, model.config.n_obs_times)
    z0 = _posterior_mean_z0(model, x)
    w = np.asarray(calibration.w, dtype=np.float64)
    if w.shape != (model.config.mixed_dim,):
        raise ContractError(f"predict: calibrated w has shape {w.shape}")
    traj = integrate(model.drift_rows, Tensor(z0[None, :]), Tensor(w[None, :]), grid_full,
                     method=model.config.method)
    return np.stack([model.decode_rows(s).values[0] for s in traj.states])


def ensemble_predict(model: MeNodeModel, x_obs, grid_full: TimeGrid, n_samples: int = 64,
                     seed: int = 0) -> EnsemblePrediction:
    """Plain posterior-ensemble baseline: no candidate selection, pointwise moments."""
    if n_samples < 2:
        raise ContractError(f"ensemble_predict: n_samples must be >= 2, got {n_samples}")
    x = _check_window(model, x_obs)
    cfg = model.config
    rng = np.random.default_rng(seed)
    mu, sigma = model.encode_rows(Tensor(x.reshape(1, -1)))
    z0_rows = mu.values + sigma.values * rng.standard_normal((n_samples, cfg.latent_dim))
    beta = model.posterior.beta.values
    sigma_b = np.exp(model.posterior.log_sigma_b.values)
    w_rows = beta + sigma_b * rng.standard_normal((n_samples, cfg.mixed_dim))
    pred = _rollout_values(model, z0_rows, w_rows, grid_full)
    alive = np.isfinite(pred).all(axis=(1, 2))
    n_alive = int(alive.sum())
    if n_alive < 2:
        raise DivergenceError("ensemble_predict: fewer than two samples stayed finite")
    live = pred[alive]
    return EnsemblePrediction(
        mean=live.mean(axis=0),
        std=live.std(axis=0, ddof=1),
        n_samples=n_samples,
        n_diverged=n_samples - n_alive,
    )
