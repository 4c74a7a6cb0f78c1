"""Post-hoc effect calibration and the posterior-ensemble baseline."""

import numpy as np
import pytest

from menode.calibration import calibrate, calibrate_batch, ensemble_predict, predict
from menode.errors import ContractError, DivergenceError
from menode.model import MeNodeModel, ModelConfig
from menode.ode import TimeGrid


def _trained_like_model(beta=0.3, sigma_b=0.05):
    """Identity-mode model with the posterior set by hand."""
    cfg = ModelConfig(identity_mode=True, n_obs_times=10)
    model = MeNodeModel(cfg, seed=0)
    model.posterior.beta.values[:] = beta
    model.posterior.log_sigma_b.values[:] = np.log(sigma_b)
    return model


def _window(z0=1.3, w=0.32, n=10, t_max=1.5):
    t = np.linspace(0.0, t_max, n)
    return (z0 * np.exp(w * t))[:, None], t


def test_calibrate_returns_best_candidate():
    model = _trained_like_model()
    x, t = _window()
    grid = TimeGrid(t, substeps=3)
    res = calibrate(model, x, grid, n_candidates=64, seed=0)
    assert res.n_candidates == 64
    assert res.mse == res.mse_min
    assert res.mse <= res.mse_median <= res.mse_max
    # the chosen effect should sit near the value that generated the window
    assert abs(res.w[0] - 0.32) < 0.05


def test_calibrate_is_deterministic_given_seed():
    model = _trained_like_model()
    x, t = _window()
    grid = TimeGrid(t, substeps=3)
    a = calibrate(model, x, grid, n_candidates=32, seed=5)
    b = calibrate(model, x, grid, n_candidates=32, seed=5)
    assert a.w == b.w and a.mse == b.mse


def test_more_candidates_tighten_the_fit_on_average():
    model = _trained_like_model()
    rng = np.random.default_rng(0)
    t = np.linspace(0.0, 1.5, 10)
    grid = TimeGrid(t, substeps=3)
    w_true = rng.normal(0.3, 0.04, size=20)
    x = 1.3 * np.exp(w_true[:, None] * t[None, :])
    few = calibrate_batch(model, x[:, :, None], grid, n_candidates=8, seed=1)
    many = calibrate_batch(model, x[:, :, None], grid, n_candidates=256, seed=1)
    assert np.mean([r.mse for r in many]) < np.mean([r.mse for r in few])


def test_predict_matches_closed_form_rollout():
    model = _trained_like_model()
    x, t = _window(z0=1.25, w=0.3, n=10, t_max=1.5)
    grid_obs = TimeGrid(t, substeps=3)
    t_full = np.concatenate([t, t[-1] + np.linspace(0.15, 1.5, 10)])
    grid_full = TimeGrid(t_full, substeps=3)
    res = calibrate(model, x, grid_obs, n_candidates=128, seed=0)
    out = predict(model, res, x, grid_obs, grid_full)
    assert out.shape == (20, 1)
    want = 1.25 * np.exp(res.w[0] * t_full)
    np.testing.assert_allclose(out[:, 0], want, rtol=1e-6)


def test_predict_requires_extending_grid():
    model = _trained_like_model()
    x, t = _window()
    grid_obs = TimeGrid(t, substeps=3)
    other = TimeGrid(t + 0.01, substeps=3)
    res = calibrate(model, x, grid_obs, n_candidates=8, seed=0)
    with pytest.raises(ContractError):
        predict(model, res, x, grid_obs, other)


def test_calibrate_raises_when_every_candidate_diverges():
    model = _trained_like_model(beta=1e6, sigma_b=1.0)
    x, t = _window()
    grid = TimeGrid(t, substeps=3)
    with pytest.raises(DivergenceError):
        calibrate(model, x, grid, n_candidates=8, seed=0)


def test_calibrate_contracts():
    model = _trained_like_model()
    x, t = _window()
    grid = TimeGrid(t, substeps=3)
    with pytest.raises(ContractError):
        calibrate(model, x, grid, n_candidates=0)
    with pytest.raises(ContractError):
        calibrate_batch(model, x[None, :5], grid, n_candidates=4)


def test_search_z0_samples_the_initial_state_too():
    model = _trained_like_model()
    x, t = _window()
    grid = TimeGrid(t, substeps=3)
    res = calibrate(model, x, grid, n_candidates=64, seed=2, search_z0=True)
    assert np.isfinite(res.mse)


def test_ensemble_predict_moments():
    model = _trained_like_model(beta=0.3, sigma_b=0.02)
    x, t = _window(w=0.3)
    t_full = np.concatenate([t, [1.8, 2.1]])
    grid_full = TimeGrid(t_full, substeps=3)
    ens = ensemble_predict(model, x, grid_full, n_samples=400, seed=0)
    assert ens.mean.shape == (12, 1) and ens.std.shape == (12, 1)
    assert ens.n_diverged == 0
    # the spread of decoded trajectories grows into the extrapolation range
    assert ens.std[-1, 0] > ens.std[1, 0]
    # pointwise mean stays close to the generating curve
    np.testing.assert_allclose(ens.mean[:, 0], 1.3 * np.exp(0.3 * t_full), rtol=0.02)


def test_ensemble_predict_needs_two_samples():
    model = _trained_like_model()
    x, t = _window()
    grid = TimeGrid(t, substeps=3)
    with pytest.raises(ContractError):
        ensemble_predict(model, x, grid, n_samples=1)
