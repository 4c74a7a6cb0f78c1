"""Monte-Carlo ELBO training with closest-sample acceptance.

Each step draws candidate (z_0, w) pairs per subject, scores them by
decoded-trajectory MSE over the observed window, keeps the ``accept_k``
closest, and minimizes

    loss = -(1/|S|) * sum_{s in S} [ log p(x | z_s, w_s)
             - kl_weight * (log q(z_s) - log p(z_s) + log q(w_s) - log p(w_s)) ]

Rejected candidates never touch the tape: the scan runs values-only and
only the accepted noise coordinates are replayed under the tape, so no
gradient can flow from a rejected draw. The largest accepted distance is
the realized acceptance threshold and is reported per epoch.
"""

from __future__ import annotations

import sys
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError, DivergenceError
from .model import MeNodeModel
from .ode import TimeGrid, integrate

_SLOW_EPOCH_SECONDS = 10.0


@dataclass(frozen=True)
class TrainConfig:
    """Sampling plan and optimizer settings for one training run."""

    n_z0: int = 10
    n_w: int = 10
    accept_k: int = 1
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    kl_weight: float = 1.0

    def __post_init__(self):
        if self.n_z0 < 1 or self.n_w < 1:
            raise ContractError(f"TrainConfig: n_z0 and n_w must be >= 1, got ({self.n_z0}, {self.n_w})")
        n_candidates = self.n_z0 * self.n_w
        if not 1 <= self.accept_k <= n_candidates:
            raise ContractError(
                f"TrainConfig: accept_k must lie in [1, {n_candidates}], got {self.accept_k}")
        if not self.learning_rate > 0:
            raise ContractError(f"TrainConfig: learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ContractError(f"TrainConfig: epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"TrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if self.kl_weight < 0:
            raise ContractError(f"TrainConfig: kl_weight must be >= 0, got {self.kl_weight}")

    @property
    def n_candidates(self) -> int:
        return self.n_z0 * self.n_w


@dataclass
class NoiseBank:
    """Standard-normal draws behind one loss evaluation.

    Candidate c = i*n_w + j pairs the i-th z_0 draw with its j-th w draw,
    so there are n_z0 initial-state draws and n_z0*n_w effect draws.
    """

    noise_z0: np.ndarray  # (B, n_z0, p)
    noise_w: np.ndarray   # (B, n_z0, n_w, m)

    @classmethod
    def draw(cls, rng, n_subjects: int, config: TrainConfig, latent_dim: int, mixed_dim: int):
        return cls(
            noise_z0=rng.standard_normal((n_subjects, config.n_z0, latent_dim)),
            noise_w=rng.standard_normal((n_subjects, config.n_z0, config.n_w, mixed_dim)),
        )

    def candidate_noise(self):
        """Expanded per-candidate noise: z0 (B, C, p) and w (B, C, m)."""
        n_subjects, n_z0, p = self.noise_z0.shape
        n_w = self.noise_w.shape[2]
        z0 = np.repeat(self.noise_z0, n_w, axis=1)
        w = self.noise_w.reshape(n_subjects, n_z0 * n_w, -1)
        return z0, w


@dataclass
class AcceptanceRecord:
    """Distances and the accepted candidate set for one subject at one step."""

    distances: np.ndarray   # (n_candidates,)
    accepted: np.ndarray    # (accept_k,) indices into distances
    epsilon: float          # max accepted distance, the realized threshold

    def __post_init__(self):
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.accepted = np.asarray(self.accepted, dtype=np.int64)

    @property
    def closest(self) -> float:
        """Window MSE of the single best candidate, regardless of accept_k."""
        return float(self.distances[self.accepted].min())


@dataclass
class EpochStats:
    epoch: int
    loss: float
    epsilon: float
    recon: float
    beta_hat: np.ndarray
    sigma_b_hat: np.ndarray
    mu_hat: float | None = None
    sigma_hat: float | None = None
    seconds: float = 0.0


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    @property
    def final(self) -> EpochStats:
        if not self.epochs:
            raise ContractError("TrainReport: no epochs were run")
        return self.epochs[-1]

    @property
    def recon_mse(self) -> float:
        """Final-epoch mean closest-sample MSE over the observed window."""
        return self.final.recon

    @property
    def epsilon_curve(self) -> np.ndarray:
        return np.array([e.epsilon for e in self.epochs])


def _decoded_squared_distances(model: MeNodeModel, x_win: np.ndarray, grid: TimeGrid,
                               z0_vals: np.ndarray, w_vals: np.ndarray) -> np.ndarray:
    """Values-only candidate scan. Returns per-candidate decoded MSE, shape (B, C).

    Diverged candidates come back as +inf rather than raising, so one wild
    draw cannot abort a step while finite candidates remain.
    """
    n_subjects, n_cand = z0_vals.shape[:2]
    rows = n_subjects * n_cand
    n_times, obs_dim = x_win.shape[1:]
    with np.errstate(over="ignore", invalid="ignore"):
        traj = integrate(
            model.drift_rows,
            Tensor(z0_vals.reshape(rows, -1)),
            Tensor(w_vals.reshape(rows, -1)),
            grid,
            method=model.config.method,
            check_finite=False,
        )
        sq = np.zeros(rows)
        for t_idx in range(n_times):
            pred = model.decode_rows(traj.states[t_idx]).values
            diff = pred - np.repeat(x_win[:, t_idx, :], n_cand, axis=0)
            sq += (diff * diff).sum(axis=1)
    mse = sq / (n_times * obs_dim)
    mse = np.where(np.isfinite(mse), mse, np.inf)
    return mse.reshape(n_subjects, n_cand)


def _select_accepted(distances: np.ndarray, accept_k: int):
    """Stable-sorted smallest-k per subject; returns indices (B, k) and records."""
    order = np.argsort(distances, axis=1, kind="stable")
    accepted = order[:, :accept_k]
    records = []
    for b in range(distances.shape[0]):
        eps = float(distances[b, accepted[b]].max())
        records.append(AcceptanceRecord(distances=distances[b], accepted=accepted[b], epsilon=eps))
    return accepted, records


def _expand_rows(tensor: Tensor, k: int) -> Tensor:
    return tensor if k == 1 else ad.repeat_interleave_rows(tensor, k)


def loss_batch(model: MeNodeModel, x_win: np.ndarray, grid: TimeGrid, config: TrainConfig,
               bank: NoiseBank, tape: Tape | None = None, frozen_accepted: np.ndarray | None = None):
    """Acceptance-weighted negative ELBO over a batch of subjects.

    ``x_win`` is (B, n_obs_times, obs_dim); only this observed window is
    ever read. Pass ``frozen_accepted`` (B, accept_k) to skip the scan and
    reuse a fixed acceptance set (gradient checks, invariance tests).
    Returns (loss tensor, acceptance records).
    """
    cfg = model.config
    x_win = np.asarray(x_win, dtype=np.float64)
    if x_win.ndim != 3 or x_win.shape[1:] != (cfg.n_obs_times, cfg.obs_dim):
        raise ContractError(
            f"loss_batch: window must be (B, {cfg.n_obs_times}, {cfg.obs_dim}), got {x_win.shape}")
    n_subjects = x_win.shape[0]
    k = config.accept_k
    x_flat = Tensor(x_win.reshape(n_subjects, -1))

    cand_z0, cand_w = bank.candidate_noise()
    if cand_z0.shape[0] != n_subjects or cand_z0.shape[1] != config.n_candidates:
        raise ContractError("loss_batch: noise bank does not match the batch and sampling plan")

    if frozen_accepted is None:
        # values-only scan; nothing here records onto the tape
        mu0, sigma0 = model.encode_rows(Tensor(x_flat.values))
        beta0 = model.posterior.beta.values
        sigma_b0 = np.exp(model.posterior.log_sigma_b.values)
        z0_vals = mu0.values[:, None, :] + sigma0.values[:, None, :] * cand_z0
        w_vals = beta0[None, None, :] + sigma_b0[None, None, :] * cand_w
        distances = _decoded_squared_distances(model, x_win, grid, z0_vals, w_vals)
        accepted, records = _select_accepted(distances, k)
    else:
        accepted = np.asarray(frozen_accepted, dtype=np.int64)
        if accepted.shape != (n_subjects, k):
            raise ContractError(
                f"loss_batch: frozen_accepted must have shape ({n_subjects}, {k}), got {accepted.shape}")
        records = []

    # replay only the accepted coordinates under the tape
    take = (np.arange(n_subjects)[:, None], accepted)
    noise_z0_acc = cand_z0[take].reshape(n_subjects * k, -1)
    noise_w_acc = cand_w[take].reshape(n_subjects * k, -1)

    if tape is not None:
        for _, param in model.parameters():
            tape.watch(param)
    mu, sigma = model.encode_rows(x_flat)
    z0 = ad.reparam_sample(_expand_rows(mu, k), _expand_rows(sigma, k), noise_z0_acc)
    rows = n_subjects * k
    beta_rows = ad.repeat_rows(model.posterior.beta, rows)
    sigma_b_rows = ad.repeat_rows(model.posterior.sigma_b(), rows)
    w = ad.reparam_sample(beta_rows, sigma_b_rows, noise_w_acc)

    traj = integrate(model.drift_rows, z0, w, grid, method=cfg.method)
    sigma_x = Tensor(cfg.obs_sigma)
    ll = None
    for t_idx in range(cfg.n_obs_times):
        target = Tensor(np.repeat(x_win[:, t_idx, :], k, axis=0))
        term = ad.gaussian_log_density_rows(target, model.decode_rows(traj.states[t_idx]), sigma_x)
        ll = term if ll is None else ad.add(ll, term)

    log_q_z0 = ad.gaussian_log_density_rows(z0, _expand_rows(mu, k), _expand_rows(sigma, k))
    log_p_z0 = ad.gaussian_log_density_rows(z0, Tensor(cfg.prior_z0_mean), Tensor(cfg.prior_z0_sigma))
    log_q_w = ad.gaussian_log_density_rows(w, beta_rows, sigma_b_rows)
    log_p_w = ad.gaussian_log_density_rows(w, Tensor(cfg.prior_w_mean), Tensor(cfg.prior_w_sigma))

    kl_terms = ad.add(ad.sub(log_q_z0, log_p_z0), ad.sub(log_q_w, log_p_w))
    elbo_rows = ad.sub(ll, ad.scale(kl_terms, config.kl_weight))
    loss = ad.neg(ad.tmean(elbo_rows))
    return loss, records


def loss_subject(model: MeNodeModel, x_win: np.ndarray, grid: TimeGrid, config: TrainConfig,
                 bank: NoiseBank, tape: Tape | None = None,
                 frozen_accepted: np.ndarray | None = None):
    """Single-subject view of :func:`loss_batch`; returns (loss, AcceptanceRecord)."""
    x_win = np.asarray(x_win, dtype=np.float64)
    if x_win.ndim != 2:
        raise ContractError(f"loss_subject: window must be 2-D (n_obs_times, obs_dim), got {x_win.shape}")
    frozen = None if frozen_accepted is None else np.asarray(frozen_accepted).reshape(1, -1)
    loss, records = loss_batch(model, x_win[None], grid, config, bank, tape=tape, frozen_accepted=frozen)
    return loss, (records[0] if records else None)


class Adam:
    """Adaptive-moment optimizer over the model's named parameter list."""

    def __init__(self, params, learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.names = [name for name, _ in params]
        self.tensors = [tensor for _, tensor in params]
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in self.tensors]
        self.v = [np.zeros_like(p.values) for p in self.tensors]

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, param in enumerate(self.tensors):
            g = grads[param].values
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            param.values = param.values - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        """Named first/second-moment arrays, for checkpointing."""
        out = []
        for name, m, v in zip(self.names, self.m, self.v):
            out.append((f"opt.m.{name}", m))
            out.append((f"opt.v.{name}", v))
        return out

    def hyperparams(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
        }


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _fmt_vec(values: np.ndarray) -> str:
    return ",".join(_fmt(v) for v in np.asarray(values).reshape(-1))


def format_epoch_line(stats: EpochStats) -> str:
    parts = [
        f"epoch={stats.epoch}",
        f"loss={_fmt(stats.loss)}",
        f"eps={_fmt(stats.epsilon)}",
        f"recon={_fmt(stats.recon)}",
        f"beta_hat={_fmt_vec(stats.beta_hat)}",
        f"sigma_b_hat={_fmt_vec(stats.sigma_b_hat)}",
    ]
    if stats.mu_hat is not None:
        parts.append(f"mu_hat={_fmt(stats.mu_hat)}")
        parts.append(f"sigma_hat={_fmt(stats.sigma_hat)}")
    return " ".join(parts)


def train(model: MeNodeModel, dataset, config: TrainConfig, log_stream=None,
          checkpoint_path=None, checkpoint_every: int = 0, optimizer: Adam | None = None,
          rng=None, start_epoch: int = 0, quiet: bool = True) -> TrainReport:
    """Fit the model on the dataset's training window.

    Reads only observations at times before the dataset's split index.
    Log lines (when ``log_stream`` is given) are deterministic given the
    seed; wall-clock goes to stderr only. When ``checkpoint_path`` is set
    a checkpoint is written every ``checkpoint_every`` epochs (and always
    after the final one), so a crash retains the last good state.
    """
    from .checkpoint import save_checkpoint  # local import, checkpoint depends on this module

    cfg = model.config
    if dataset.split_index != cfg.n_obs_times:
        raise ContractError(
            f"train: model expects {cfg.n_obs_times} observed times but the dataset splits at {dataset.split_index}")
    if dataset.obs_dim != cfg.obs_dim:
        raise ContractError(f"train: obs_dim mismatch, model {cfg.obs_dim} vs data {dataset.obs_dim}")

    x_win = dataset.X[:, : dataset.split_index, :]
    grid = TimeGrid(times=dataset.times[: dataset.split_index], substeps=cfg.substeps)
    n_subjects = dataset.n_subjects

    if optimizer is None:
        optimizer = Adam(model.parameters(), learning_rate=config.learning_rate)
    if rng is None:
        rng = np.random.default_rng(config.seed)

    mu_hat = sigma_hat = None
    if cfg.identity_mode:
        first_obs = x_win[:, 0, 0]
        mu_hat = float(first_obs.mean())
        sigma_hat = float(first_obs.std(ddof=1)) if n_subjects > 1 else 0.0

    report = TrainReport()
    for epoch in range(start_epoch, config.epochs):
        started = time.perf_counter()
        perm = rng.permutation(n_subjects)
        loss_sum = 0.0
        eps_sum = 0.0
        recon_sum = 0.0
        for lo in range(0, n_subjects, config.batch_size):
            idx = perm[lo: lo + config.batch_size]
            bank = NoiseBank.draw(rng, idx.size, config, cfg.latent_dim, cfg.mixed_dim)
            with Tape() as tape:
                loss, records = loss_batch(model, x_win[idx], grid, config, bank, tape=tape)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise DivergenceError(f"training loss became non-finite in epoch {epoch}")
                grads = ad.backward(tape, loss)
            optimizer.step(grads)
            loss_sum += loss_value * idx.size
            eps_sum += sum(r.epsilon for r in records)
            recon_sum += sum(r.closest for r in records)
        seconds = time.perf_counter() - started
        stats = EpochStats(
            epoch=epoch,
            loss=loss_sum / n_subjects,
            epsilon=eps_sum / n_subjects,
            recon=recon_sum / n_subjects,
            beta_hat=model.posterior.beta.values.copy(),
            sigma_b_hat=np.exp(model.posterior.log_sigma_b.values),
            mu_hat=mu_hat,
            sigma_hat=sigma_hat,
            seconds=seconds,
        )
        report.epochs.append(stats)
        if log_stream is not None:
            log_stream.write(format_epoch_line(stats) + "\n")
            log_stream.flush()
        if not quiet:
            print(f"epoch {epoch}: {seconds:.2f}s", file=sys.stderr)
        if seconds > _SLOW_EPOCH_SECONDS:
            warnings.warn(f"epoch {epoch} took {seconds:.1f}s, over the {_SLOW_EPOCH_SECONDS:.0f}s budget")
        if checkpoint_path is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, model, optimizer=optimizer, rng=rng, epoch=epoch + 1)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, optimizer=optimizer, rng=rng, epoch=config.epochs)
    return report


def elbo_gradient_check(model: MeNodeModel, x_win: np.ndarray, grid: TimeGrid,
                        config: TrainConfig, h: float = 1e-5):
    """Compare tape gradients of the loss against central differences.

    The acceptance set is frozen before differencing so both sides see
    the same branch. Returns (max relative error, {param name: error}).
    """
    x_win = np.asarray(x_win, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    bank = NoiseBank.draw(rng, 1, config, model.config.latent_dim, model.config.mixed_dim)
    _, record = loss_subject(model, x_win, grid, config, bank)
    frozen = record.accepted

    def value() -> float:
        loss, _ = loss_subject(model, x_win, grid, config, bank, frozen_accepted=frozen)
        return loss.item()

    with Tape() as tape:
        loss, _ = loss_subject(model, x_win, grid, config, bank, tape=tape, frozen_accepted=frozen)
        grads = ad.backward(tape, loss)

    table = {}
    worst = 0.0
    for name, param in model.parameters():
        analytic = grads[param].values
        numeric = ad.numeric_gradient(value, param, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        rel = float((np.abs(analytic - numeric) / denom).max())
        table[name] = rel
        worst = max(worst, rel)
    return worst, table
