"""The mixed-effects neural ODE model.

Generative story, per subject: the observed window is encoded into a
Gaussian over the initial latent state z_0; a subject-level effect
w = beta + b with b ~ N(0, diag(sigma_b)^2) multiplies a shared state
matrix, dz/dt = Gamma(z) @ w; observations are decoded states plus
N(0, obs_sigma^2) noise. In identity mode (the 1-D closed-form setup)
the encoder returns the first observed value with a fixed spread, and
Gamma and the decoder are identity maps, so the only learned parameters
are beta and log sigma_b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .networks import Mlp
from .ode import TimeGrid, Trajectory, integrate

# encoder log-sigma head starts near this spread instead of 1.0
_ENC_SIGMA_INIT = 0.1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and observation-noise settings; all flat scalars."""

    latent_dim: int = 1
    mixed_dim: int = 1
    obs_dim: int = 1
    n_obs_times: int = 10
    hidden_dim: int = 16
    obs_sigma: float = 0.1
    identity_mode: bool = False
    identity_sigma0: float = 0.05
    sigma_b_init: float = 0.1
    prior_z0_mean: float = 0.0
    prior_z0_sigma: float = 1.0
    prior_w_mean: float = 0.0
    prior_w_sigma: float = 1.0
    method: str = "rk4"
    substeps: int = 3

    def __post_init__(self):
        for name in ("latent_dim", "mixed_dim", "obs_dim", "n_obs_times", "hidden_dim", "substeps"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"ModelConfig: {name} must be >= 1, got {getattr(self, name)}")
        for name in ("obs_sigma", "identity_sigma0", "sigma_b_init", "prior_z0_sigma", "prior_w_sigma"):
            if not float(getattr(self, name)) > 0:
                raise ContractError(f"ModelConfig: {name} must be > 0, got {getattr(self, name)}")
        if self.method not in ("euler", "rk4"):
            raise ContractError(f"ModelConfig: method must be euler or rk4, got {self.method!r}")
        if self.identity_mode and not (self.latent_dim == self.obs_dim == self.mixed_dim == 1):
            raise ContractError("ModelConfig: identity mode requires latent_dim = obs_dim = mixed_dim = 1")


class MixedEffectPosterior:
    """Learned Gaussian over the subject effect: w ~ N(beta, diag(sigma_b)^2).

    sigma_b is kept as log_sigma_b so it stays positive by construction.
    """

    def __init__(self, mixed_dim: int, sigma_b_init: float):
        self.beta = Tensor(np.zeros(mixed_dim))
        self.log_sigma_b = Tensor(np.full(mixed_dim, math.log(sigma_b_init)))

    def sigma_b(self) -> Tensor:
        return ad.exp(self.log_sigma_b)

    def parameters(self):
        return [("posterior.beta", self.beta), ("posterior.log_sigma_b", self.log_sigma_b)]


class MeNodeModel:
    """Encoder, latent dynamics, decoder and the mixed-effect posterior.

    All row-batched methods take (B, .) tensors. The drift is autonomous;
    the time argument exists so the integrator can pass it uniformly.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        p, m, d = config.latent_dim, config.mixed_dim, config.obs_dim
        self.posterior = MixedEffectPosterior(m, config.sigma_b_init)
        if config.identity_mode:
            self.encoder_trunk = None
            self.encoder_mu = None
            self.encoder_logsigma = None
            self.gamma_net = None
            self.decoder = None
        else:
            rng = np.random.default_rng(seed)
            n_in = config.n_obs_times * d
            h = config.hidden_dim
            self.encoder_trunk = Mlp([n_in, h], final_activation=True, rng=rng, name="encoder_trunk")
            self.encoder_mu = Mlp([h, p], rng=rng, name="encoder_mu")
            self.encoder_logsigma = Mlp([h, p], rng=rng, name="encoder_logsigma")
            self.gamma_net = Mlp([p, h, p * m], rng=rng, name="gamma")
            self.decoder = Mlp([p, h, d], rng=rng, name="decoder")

    def parameters(self):
        out = list(self.posterior.parameters())
        if not self.config.identity_mode:
            for net in (self.encoder_trunk, self.encoder_mu, self.encoder_logsigma,
                        self.gamma_net, self.decoder):
                out.extend(net.parameters())
        return out

    def grid(self, times) -> TimeGrid:
        return TimeGrid(times=np.asarray(times, dtype=np.float64), substeps=self.config.substeps)

    # -- row-batched pieces -------------------------------------------------

    def encode_rows(self, x_flat: Tensor):
        """(B, n_obs_times*obs_dim) -> posterior mean and spread of z_0, both (B, p)."""
        cfg = self.config
        n_in = cfg.n_obs_times * cfg.obs_dim
        if x_flat.values.ndim != 2 or x_flat.shape[1] != n_in:
            raise ContractError(f"encode_rows: expected (B, {n_in}), got {x_flat.shape}")
        if cfg.identity_mode:
            mu = Tensor(x_flat.values[:, : cfg.obs_dim].copy())
            sigma = Tensor(np.full((x_flat.shape[0], 1), cfg.identity_sigma0))
            return mu, sigma
        h = self.encoder_trunk.forward(x_flat)
        mu = self.encoder_mu.forward(h)
        log_sigma = ad.add(self.encoder_logsigma.forward(h), Tensor(math.log(_ENC_SIGMA_INIT)))
        return mu, ad.exp(log_sigma)

    def decode_rows(self, z: Tensor) -> Tensor:
        if self.config.identity_mode:
            return z
        return self.decoder.forward(z)

    def gamma_rows(self, z: Tensor) -> Tensor:
        """State matrix, flattened row-major to (B, p*m)."""
        if self.config.identity_mode:
            return z
        return self.gamma_net.forward(z)

    def drift_rows(self, z: Tensor, w: Tensor, t: float) -> Tensor:
        if self.config.identity_mode:
            return ad.mul(z, w)
        p, m = self.config.latent_dim, self.config.mixed_dim
        return ad.matvec_flat(self.gamma_rows(z), w, p, m)

    def drift_vec(self, z: Tensor, w: Tensor, t: float) -> Tensor:
        """Drift for a single 1-D state (p,), used by the subject-level ops."""
        if self.config.identity_mode:
            return ad.mul(z, w)
        p, m = self.config.latent_dim, self.config.mixed_dim
        z2 = ad.reshape(z, (1, p))
        w2 = ad.reshape(w, (1, m))
        return ad.reshape(self.drift_rows(z2, w2, 0.0), (p,))

    def to_config_dict(self) -> dict:
        return asdict(self.config)


def _check_window(model: MeNodeModel, x_seq) -> np.ndarray:
    cfg = model.config
    x = np.asarray(x_seq, dtype=np.float64)
    if x.shape != (cfg.n_obs_times, cfg.obs_dim):
        raise ContractError(
            f"observed window must have shape ({cfg.n_obs_times}, {cfg.obs_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("observed window contains non-finite values")
    return x


def encode(model: MeNodeModel, x_seq):
    """Posterior over z_0 for one subject: (mu, sigma), each shape (p,)."""
    x = _check_window(model, x_seq)
    mu, sigma = model.encode_rows(Tensor(x.reshape(1, -1)))
    p = model.config.latent_dim
    return ad.reshape(mu, (p,)), ad.reshape(sigma, (p,))


def decode(model: MeNodeModel, z) -> Tensor:
    """Map latent state(s) to observation space; accepts (p,) or (B, p)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    p = model.config.latent_dim
    if z.values.ndim == 1:
        if z.shape != (p,):
            raise ContractError(f"decode: expected shape ({p},), got {z.shape}")
        return ad.reshape(model.decode_rows(ad.reshape(z, (1, p))), (model.config.obs_dim,))
    return model.decode_rows(z)


def sample_subject(model: MeNodeModel, x_seq, grid: TimeGrid, noise_z0, noise_w):
    """One posterior draw for one subject: (z0, w, latent trajectory on ``grid``)."""
    cfg = model.config
    noise_z0 = np.asarray(noise_z0, dtype=np.float64)
    noise_w = np.asarray(noise_w, dtype=np.float64)
    if noise_z0.shape != (cfg.latent_dim,):
        raise ContractError(f"noise_z0 must have shape ({cfg.latent_dim},), got {noise_z0.shape}")
    if noise_w.shape != (cfg.mixed_dim,):
        raise ContractError(f"noise_w must have shape ({cfg.mixed_dim},), got {noise_w.shape}")
    mu, sigma = encode(model, x_seq)
    z0 = ad.reparam_sample(mu, sigma, noise_z0)
    w = ad.reparam_sample(model.posterior.beta, model.posterior.sigma_b(), noise_w)
    traj = integrate(model.drift_vec, z0, w, grid, method=cfg.method)
    return z0, w, traj


def log_likelihood(model: MeNodeModel, x_obs, trajectory: Trajectory) -> Tensor:
    """Gaussian observation log density of ``x_obs`` under the decoded trajectory.

    Equals -sum((x - decoded)^2) / (2*obs_sigma^2) - N*log(obs_sigma*sqrt(2*pi))
    with N the number of observed scalars.
    """
    x = np.asarray(x_obs, dtype=np.float64)
    n_times = len(trajectory.states)
    if x.shape != (n_times, model.config.obs_dim):
        raise ContractError(
            f"log_likelihood: observations {x.shape} do not match trajectory ({n_times}, {model.config.obs_dim})")
    sigma_x = Tensor(model.config.obs_sigma)
    total = None
    for t_idx in range(n_times):
        pred = decode(model, trajectory.states[t_idx])
        term = ad.gaussian_log_density(Tensor(x[t_idx]), pred, sigma_x)
        total = term if total is None else ad.add(total, term)
    return total
