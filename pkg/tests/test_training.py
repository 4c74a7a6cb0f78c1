"""Training loop: loss value, acceptance mechanics, optimizer, gradient check."""

import io

import numpy as np
import pytest

import menode.autodiff as ad
from menode.autodiff import Tape, Tensor, backward
from menode.data import ToySpec, generate_toy
from menode.errors import ContractError
from menode.model import MeNodeModel, ModelConfig
from menode.ode import TimeGrid
from menode.training import (
    Adam,
    NoiseBank,
    TrainConfig,
    elbo_gradient_check,
    format_epoch_line,
    loss_batch,
    loss_subject,
    train,
)


def _identity_model(sigma_b_init=0.1, n_obs_times=5):
    cfg = ModelConfig(identity_mode=True, n_obs_times=n_obs_times, sigma_b_init=sigma_b_init)
    return MeNodeModel(cfg, seed=0)


def _zero_noise_bank(n_subjects, config, p, m):
    return NoiseBank(
        noise_z0=np.zeros((n_subjects, config.n_z0, p)),
        noise_w=np.zeros((n_subjects, config.n_z0, config.n_w, m)),
    )


def _normal_logpdf(x, mu, sigma):
    return -np.log(sigma) - 0.5 * ((x - mu) / sigma) ** 2 - 0.5 * np.log(2 * np.pi)


def test_loss_matches_hand_computed_single_draw():
    """Zero noise, one candidate: the loss is a closed-form expression.

    With beta = 0 the latent path is constant at the first observation,
    so the likelihood, both posterior densities and both prior densities
    can all be written down directly.
    """
    model = _identity_model(sigma_b_init=0.2)
    cfg = model.config
    config = TrainConfig(n_z0=1, n_w=1, accept_k=1)
    x = np.array([[1.2], [1.25], [1.3], [1.28], [1.22]])
    grid = TimeGrid(np.linspace(0.0, 1.0, 5), substeps=cfg.substeps)
    bank = _zero_noise_bank(1, config, 1, 1)
    loss, record = loss_subject(model, x, grid, config, bank)

    z0 = x[0, 0]
    ll = _normal_logpdf(x[:, 0], z0, cfg.obs_sigma).sum()
    log_q_z0 = _normal_logpdf(z0, z0, cfg.identity_sigma0)
    log_p_z0 = _normal_logpdf(z0, 0.0, 1.0)
    log_q_w = _normal_logpdf(0.0, 0.0, 0.2)
    log_p_w = _normal_logpdf(0.0, 0.0, 1.0)
    want = -(ll - (log_q_z0 - log_p_z0 + log_q_w - log_p_w))
    np.testing.assert_allclose(loss.item(), want, rtol=1e-12)
    # the single candidate is accepted and its distance is the window MSE
    np.testing.assert_allclose(record.epsilon, ((x[:, 0] - z0) ** 2).mean(), rtol=1e-12)


def test_kl_weight_scales_the_divergence_term():
    model = _identity_model()
    x = np.array([[1.0], [1.1], [1.2], [1.1], [1.0]])
    grid = TimeGrid(np.linspace(0.0, 1.0, 5), substeps=3)
    losses = {}
    for klw in (0.0, 0.5, 1.0):
        config = TrainConfig(n_z0=1, n_w=1, accept_k=1, kl_weight=klw)
        bank = _zero_noise_bank(1, config, 1, 1)
        losses[klw], _ = loss_subject(model, x, grid, config, bank)
    gap_half = losses[0.5].item() - losses[0.0].item()
    gap_full = losses[1.0].item() - losses[0.0].item()
    np.testing.assert_allclose(gap_full, 2.0 * gap_half, rtol=1e-10)


def test_noise_bank_candidate_pairing():
    rng = np.random.default_rng(0)
    config = TrainConfig(n_z0=3, n_w=4, accept_k=1)
    bank = NoiseBank.draw(rng, 2, config, latent_dim=2, mixed_dim=1)
    z0, w = bank.candidate_noise()
    assert z0.shape == (2, 12, 2) and w.shape == (2, 12, 1)
    for i in range(3):
        for j in range(4):
            c = i * 4 + j
            np.testing.assert_array_equal(z0[:, c], bank.noise_z0[:, i])
            np.testing.assert_array_equal(w[:, c], bank.noise_w[:, i, j])


def test_rejected_candidates_never_influence_loss_or_gradient():
    """Poisoning every rejected noise coordinate must change nothing."""
    model = _identity_model()
    config = TrainConfig(n_z0=4, n_w=3, accept_k=2, seed=3)
    rng = np.random.default_rng(7)
    x = 1.3 * np.exp(0.3 * np.linspace(0, 1, 5))[None, :, None] * np.ones((6, 1, 1))
    x = x + 0.01 * rng.standard_normal(x.shape)
    grid = TimeGrid(np.linspace(0.0, 1.0, 5), substeps=3)
    bank = NoiseBank.draw(rng, 6, config, 1, 1)

    _, records = loss_batch(model, x, grid, config, bank)
    accepted = np.stack([r.accepted for r in records])

    def run(nb):
        with Tape() as tape:
            loss, _ = loss_batch(model, x, grid, config, nb, tape=tape,
                                 frozen_accepted=accepted)
            grads = backward(tape, loss)
        return loss.item(), {n: g.values.copy() for (n, p), g in
                             zip(model.parameters(), (grads[p] for _, p in model.parameters()))}

    base_loss, base_grads = run(bank)

    z0_cand, w_cand = bank.candidate_noise()
    poison_z0 = bank.noise_z0.copy()
    poison_w = bank.noise_w.copy()
    n_w = config.n_w
    for b in range(6):
        for c in range(config.n_candidates):
            if c not in accepted[b]:
                # a z0 draw is shared by its n_w candidates; only poison it
                # when every candidate that uses it was rejected
                i = c // n_w
                if not any(i * n_w + j in accepted[b] for j in range(n_w)):
                    poison_z0[b, i] = 1e6
                poison_w[b, i, c % n_w] = -1e6
    poisoned = NoiseBank(noise_z0=poison_z0, noise_w=poison_w)

    new_loss, new_grads = run(poisoned)
    assert new_loss == base_loss
    for name in base_grads:
        np.testing.assert_array_equal(new_grads[name], base_grads[name])


def test_acceptance_keeps_k_smallest_distances():
    model = _identity_model()
    config = TrainConfig(n_z0=2, n_w=5, accept_k=3, seed=0)
    rng = np.random.default_rng(1)
    x = np.cumsum(rng.uniform(0.1, 0.2, size=(3, 5, 1)), axis=1)
    grid = TimeGrid(np.linspace(0.0, 1.0, 5), substeps=3)
    bank = NoiseBank.draw(rng, 3, config, 1, 1)
    _, records = loss_batch(model, x, grid, config, bank)
    for rec in records:
        assert rec.accepted.shape == (3,)
        worst_kept = rec.distances[rec.accepted].max()
        rejected = np.setdiff1d(np.arange(10), rec.accepted)
        assert worst_kept <= rec.distances[rejected].min()
        np.testing.assert_allclose(rec.epsilon, worst_kept)
        np.testing.assert_allclose(rec.closest, rec.distances.min())


def test_training_reduces_acceptance_threshold():
    data = generate_toy(ToySpec(n_subjects=80), seed=0)
    train_set, _ = data.train_test_split(0.8)
    model = MeNodeModel(ModelConfig(identity_mode=True, n_obs_times=10, sigma_b_init=0.02), seed=0)
    report = train(model, train_set, TrainConfig(n_z0=4, n_w=4, accept_k=1, epochs=12, seed=0))
    curve = report.epsilon_curve
    assert curve[-1] < curve[0]
    assert report.recon_mse == report.final.recon


def test_train_config_contracts():
    with pytest.raises(ContractError):
        TrainConfig(n_z0=0)
    with pytest.raises(ContractError):
        TrainConfig(n_z0=2, n_w=2, accept_k=5)
    with pytest.raises(ContractError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractError):
        TrainConfig(kl_weight=-0.1)


def test_train_rejects_mismatched_split():
    data = generate_toy(ToySpec(n_subjects=20), seed=0)
    model = MeNodeModel(ModelConfig(identity_mode=True, n_obs_times=7), seed=0)
    with pytest.raises(ContractError):
        train(model, data, TrainConfig(epochs=1))


def test_adam_single_step_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]))
    opt = Adam([("p", p)], learning_rate=0.1)
    g = np.array([0.5, -0.25])
    opt.step({p: Tensor(g)})
    # after one step m_hat = g and v_hat = g^2, so the move is lr*sign-ish
    want = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.values, want, rtol=1e-9)
    assert opt.t == 1
    names = [name for name, _ in opt.state_arrays()]
    assert names == ["opt.m.p", "opt.v.p"]


def test_format_epoch_line_is_deterministic_text():
    from menode.training import EpochStats

    stats = EpochStats(epoch=3, loss=1.25, epsilon=0.5, recon=0.25,
                       beta_hat=np.array([0.3]), sigma_b_hat=np.array([0.1]))
    line = format_epoch_line(stats)
    assert line == ("epoch=3 loss=1.25 eps=0.5 recon=0.25 "
                    "beta_hat=0.29999999999999999 sigma_b_hat=0.10000000000000001")


def test_train_log_stream_lines_match_report():
    data = generate_toy(ToySpec(n_subjects=30), seed=1)
    train_set, _ = data.train_test_split(0.8)
    model = MeNodeModel(ModelConfig(identity_mode=True, n_obs_times=10), seed=1)
    stream = io.StringIO()
    report = train(model, train_set, TrainConfig(n_z0=2, n_w=2, epochs=3, seed=1),
                   log_stream=stream)
    lines = stream.getvalue().splitlines()
    assert len(lines) == 3
    assert lines[-1] == format_epoch_line(report.final)


def test_elbo_gradient_check_identity_mode():
    model = _identity_model()
    x = 1.3 * np.exp(0.3 * np.linspace(0, 1, 5))[:, None]
    grid = TimeGrid(np.linspace(0.0, 1.0, 5), substeps=3)
    config = TrainConfig(n_z0=3, n_w=3, accept_k=2, seed=0)
    worst, table = elbo_gradient_check(model, x, grid, config)
    assert set(table) == {"posterior.beta", "posterior.log_sigma_b"}
    assert worst < 1e-6


def test_elbo_gradient_check_full_model():
    cfg = ModelConfig(latent_dim=2, mixed_dim=2, obs_dim=1, n_obs_times=5, hidden_dim=4)
    model = MeNodeModel(cfg, seed=2)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 1))
    grid = TimeGrid(np.linspace(0.0, 1.0, 5), substeps=2)
    config = TrainConfig(n_z0=2, n_w=2, accept_k=1, seed=2)
    worst, _ = elbo_gradient_check(model, x, grid, config)
    assert worst < 1e-4
