"""Model wiring: encoder, drift, decoder, subject sampling, likelihood."""

import numpy as np
import pytest

from menode.autodiff import Tensor
from menode.errors import ContractError
from menode.model import (
    MeNodeModel,
    ModelConfig,
    decode,
    encode,
    log_likelihood,
    sample_subject,
)
from menode.ode import TimeGrid, integrate


def _identity_model(**kw):
    cfg = ModelConfig(identity_mode=True, n_obs_times=kw.pop("n_obs_times", 5), **kw)
    return MeNodeModel(cfg, seed=0)


def _full_model(seed=0, **kw):
    cfg = ModelConfig(latent_dim=kw.pop("latent_dim", 2), mixed_dim=kw.pop("mixed_dim", 3),
                      obs_dim=kw.pop("obs_dim", 2), n_obs_times=kw.pop("n_obs_times", 4),
                      hidden_dim=8, **kw)
    return MeNodeModel(cfg, seed=seed)


def test_identity_encoder_returns_first_observation():
    model = _identity_model(identity_sigma0=0.05)
    x = np.linspace(1.0, 2.0, 5)[:, None]
    mu, sigma = encode(model, x)
    np.testing.assert_allclose(mu.values, [1.0])
    np.testing.assert_allclose(sigma.values, [0.05])


def test_identity_mode_dimension_contract():
    with pytest.raises(ContractError):
        ModelConfig(identity_mode=True, latent_dim=2)


def test_config_rejects_bad_scalars():
    with pytest.raises(ContractError):
        ModelConfig(obs_sigma=0.0)
    with pytest.raises(ContractError):
        ModelConfig(substeps=0)
    with pytest.raises(ContractError):
        ModelConfig(method="midpoint")


def test_identity_parameters_are_posterior_only():
    model = _identity_model(sigma_b_init=0.3)
    names = [name for name, _ in model.parameters()]
    assert names == ["posterior.beta", "posterior.log_sigma_b"]
    np.testing.assert_allclose(model.posterior.beta.values, [0.0])
    np.testing.assert_allclose(model.posterior.sigma_b().values, [0.3], rtol=1e-12)


def test_full_model_shapes_and_param_names():
    model = _full_model()
    cfg = model.config
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(7, cfg.n_obs_times * cfg.obs_dim)))
    mu, sigma = model.encode_rows(x)
    assert mu.shape == (7, cfg.latent_dim)
    assert sigma.shape == (7, cfg.latent_dim)
    assert np.all(sigma.values > 0)

    z = Tensor(rng.normal(size=(7, cfg.latent_dim)))
    assert model.decode_rows(z).shape == (7, cfg.obs_dim)
    assert model.gamma_rows(z).shape == (7, cfg.latent_dim * cfg.mixed_dim)

    w = Tensor(rng.normal(size=(7, cfg.mixed_dim)))
    assert model.drift_rows(z, w, 0.0).shape == (7, cfg.latent_dim)

    names = [name for name, _ in model.parameters()]
    assert names[0] == "posterior.beta"
    assert any(name.startswith("encoder_trunk.") for name in names)
    assert any(name.startswith("decoder.") for name in names)
    assert len(names) == len(set(names))


def test_same_seed_same_weights_different_seed_differs():
    a, b, c = _full_model(seed=4), _full_model(seed=4), _full_model(seed=5)
    for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.values, pb.values)
    assert any(not np.array_equal(pa.values, pc.values)
               for (_, pa), (_, pc) in zip(a.parameters(), c.parameters()))


def test_drift_rows_matches_per_row_matrix_product():
    model = _full_model()
    cfg = model.config
    rng = np.random.default_rng(2)
    z = Tensor(rng.normal(size=(6, cfg.latent_dim)))
    w = Tensor(rng.normal(size=(6, cfg.mixed_dim)))
    out = model.drift_rows(z, w, 0.0).values
    gamma = model.gamma_rows(z).values.reshape(6, cfg.latent_dim, cfg.mixed_dim)
    want = np.einsum("rpm,rm->rp", gamma, w.values)
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_sample_subject_with_zero_noise_is_posterior_mean_path():
    model = _identity_model()
    x = 1.4 * np.exp(0.25 * np.linspace(0, 1, 5))[:, None]
    grid = model.grid(np.linspace(0, 1, 5))
    z0, w, traj = sample_subject(model, x, grid, np.zeros(1), np.zeros(1))
    np.testing.assert_allclose(z0.values, [x[0, 0]])
    np.testing.assert_allclose(w.values, model.posterior.beta.values)
    # beta starts at zero, so the zero-noise trajectory is constant
    np.testing.assert_allclose(traj.values, np.full((5, 1), x[0, 0]), rtol=1e-12)


def test_sample_subject_noise_shape_contract():
    model = _identity_model()
    x = np.ones((5, 1))
    grid = model.grid(np.linspace(0, 1, 5))
    with pytest.raises(ContractError):
        sample_subject(model, x, grid, np.zeros(2), np.zeros(1))


def test_log_likelihood_frozen_value():
    """One observation, residual exactly one noise sd: known density value."""
    model = _identity_model(n_obs_times=1, obs_sigma=0.1)
    grid = TimeGrid(np.array([0.0]))
    traj = integrate(model.drift_vec, Tensor([1.0]), Tensor([0.0]), grid)
    ll = log_likelihood(model, np.array([[1.1]]), traj)
    # -log(0.1) - 0.5 - 0.5*log(2*pi), worked out by hand
    np.testing.assert_allclose(ll.item(), 0.8836465597893728, rtol=0, atol=1e-13)


def test_log_likelihood_sums_over_times_and_dims():
    model = _full_model(obs_sigma=0.5)
    cfg = model.config
    grid = TimeGrid(np.linspace(0.0, 1.0, 3))
    rng = np.random.default_rng(8)
    z0 = Tensor(rng.normal(size=cfg.latent_dim))
    w = Tensor(rng.normal(size=cfg.mixed_dim))
    traj = integrate(model.drift_vec, z0, w, grid)
    x = rng.normal(size=(3, cfg.obs_dim))
    ll = log_likelihood(model, x, traj).item()
    pred = np.stack([decode(model, s).values for s in traj.states])
    want = float((-np.log(0.5) - 0.5 * ((x - pred) / 0.5) ** 2 - 0.5 * np.log(2 * np.pi)).sum())
    np.testing.assert_allclose(ll, want, rtol=1e-12)


def test_log_likelihood_shape_contract():
    model = _identity_model()
    grid = TimeGrid(np.linspace(0.0, 1.0, 5))
    traj = integrate(model.drift_vec, Tensor([1.0]), Tensor([0.1]), grid)
    with pytest.raises(ContractError):
        log_likelihood(model, np.ones((4, 1)), traj)


def test_window_check_rejects_nonfinite():
    model = _identity_model()
    x = np.ones((5, 1))
    x[2, 0] = np.nan
    with pytest.raises(ContractError):
        encode(model, x)


def test_config_dict_round_trip():
    model = _full_model()
    again = ModelConfig(**model.to_config_dict())
    assert again == model.config
