"""Evaluation metrics: per-step errors, parameter recovery, permutation test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def _fmt(value) -> str:
    return format(float(value), ".17g")


@dataclass
class PerStepMse:
    """Across-subject mean/std of the per-step squared error."""

    times: np.ndarray
    mean: np.ndarray  # (n_times,)
    std: np.ndarray   # (n_times,)


def per_step_mse(times: np.ndarray, y_true: np.ndarray, y_pred: np.ndarray) -> PerStepMse:
    """Squared error averaged over coordinates, summarized across subjects per step.

    ``y_true`` and ``y_pred`` are (n_subjects, n_times, obs_dim).
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape or y_true.ndim != 3:
        raise ContractError(
            f"per_step_mse: shapes must match and be 3-D, got {y_true.shape} vs {y_pred.shape}")
    times = np.asarray(times, dtype=np.float64)
    if times.shape != (y_true.shape[1],):
        raise ContractError("per_step_mse: times do not match the trajectories")
    err = ((y_true - y_pred) ** 2).mean(axis=2)  # (n_subjects, n_times)
    std = err.std(axis=0, ddof=1) if err.shape[0] > 1 else np.zeros(err.shape[1])
    return PerStepMse(times=times.copy(), mean=err.mean(axis=0), std=std)


@dataclass
class PermutationResult:
    times_index: np.ndarray   # step indices the p-values refer to
    observed: np.ndarray      # group-mean distance per step
    p_values: np.ndarray      # (n_steps,)
    n_perms: int
    observed_global: float = 0.0  # per-step statistic summed over all steps
    p_global: float = 1.0         # one p-value for the whole trajectory


def permutation_test(latent_a: np.ndarray, latent_b: np.ndarray, n_perms: int = 499,
                     seed: int = 0) -> PermutationResult:
    """Per-step group-difference test on latent trajectories.

    The statistic at step t is the Euclidean distance between the group
    means of the latent vectors. Group labels are reshuffled once per
    resample and that same relabeling scores every step, then
    p_t = (1 + #{permuted >= observed}) / (1 + n_perms).

    ``p_global`` pools the per-step distances into a single sum so a run
    yields one trajectory-level p-value as well.
    """
    latent_a = np.asarray(latent_a, dtype=np.float64)
    latent_b = np.asarray(latent_b, dtype=np.float64)
    if latent_a.ndim != 3 or latent_b.ndim != 3 or latent_a.shape[1:] != latent_b.shape[1:]:
        raise ContractError(
            f"permutation_test: trajectories must be (N, T, p) on one grid, got {latent_a.shape} vs {latent_b.shape}")
    n_a, n_b = latent_a.shape[0], latent_b.shape[0]
    if n_a < 2 or n_b < 2:
        raise ContractError("permutation_test: need at least two subjects per group")
    if n_perms < 100:
        raise ContractError(f"permutation_test: n_perms must be >= 100, got {n_perms}")

    pooled = np.concatenate([latent_a, latent_b], axis=0)
    n_steps = pooled.shape[1]

    def group_distance(labels_a: np.ndarray) -> np.ndarray:
        mean_a = pooled[labels_a].mean(axis=0)          # (T, p)
        mean_b = pooled[~labels_a].mean(axis=0)
        return np.linalg.norm(mean_a - mean_b, axis=1)  # (T,)

    labels = np.zeros(n_a + n_b, dtype=bool)
    labels[:n_a] = True
    observed = group_distance(labels)

    rng = np.random.default_rng(seed)
    exceed = np.zeros(n_steps, dtype=np.int64)
    exceed_global = 0
    for _ in range(n_perms):
        perm_dist = group_distance(labels[rng.permutation(n_a + n_b)])
        exceed += perm_dist >= observed
        exceed_global += perm_dist.sum() >= observed.sum()
    p_values = (1.0 + exceed) / (1.0 + n_perms)
    return PermutationResult(
        times_index=np.arange(n_steps),
        observed=observed,
        p_values=p_values,
        n_perms=n_perms,
        observed_global=float(observed.sum()),
        p_global=float((1.0 + exceed_global) / (1.0 + n_perms)),
    )


@dataclass
class EvalReport:
    """Everything the evaluate command scores, in one place.

    ``wall_clock_seconds`` is informational and deliberately excluded
    from the deterministic text rendering.
    """

    interp: PerStepMse
    extrap: PerStepMse
    recon_mse: float
    recovered: dict = field(default_factory=dict)   # name -> (estimate, truth or None)
    param_mse: float | None = None
    p_values: PermutationResult | None = None
    wall_clock_seconds: float = 0.0

    def render(self) -> str:
        """Deterministic key=value text block (no timing)."""
        fmt = _fmt
        lines = []
        lines.append(f"recon_mse={fmt(self.recon_mse)}")
        lines.append(f"interp_mse={fmt(self.interp.mean.mean())}")
        lines.append(f"extrap_mse={fmt(self.extrap.mean.mean())}")
        if self.param_mse is not None:
            lines.append(f"param_mse={fmt(self.param_mse)}")
        for name in sorted(self.recovered):
            estimate, truth = self.recovered[name]
            lines.append(f"{name}={fmt(estimate)}" + ("" if truth is None else f" true={fmt(truth)}"))
        for split_name, block in (("interp", self.interp), ("extrap", self.extrap)):
            for t, m, s in zip(block.times, block.mean, block.std):
                lines.append(f"per_step {split_name} t={fmt(t)} mse={fmt(m)} std={fmt(s)}")
        if self.p_values is not None:
            for idx, p in zip(self.p_values.times_index, self.p_values.p_values):
                lines.append(f"p_value step={int(idx)} p={fmt(p)}")
        return "\n".join(lines) + "\n"


def recovered_params(model, dataset) -> dict:
    """Point estimates of the population parameters, paired with truth when stored.

    beta/sigma_b come from the learned posterior. In identity mode mu/sigma
    summarize the per-subject posterior means (there is no global learned
    initial-state distribution to read off).
    """
    out = {}
    beta = model.posterior.beta.values
    sigma_b = np.exp(model.posterior.log_sigma_b.values)
    true_w_mean = true_w_std = None
    if dataset.true_w is not None and dataset.true_w.shape[1] == beta.size:
        true_w_mean = dataset.true_w.mean(axis=0)
        true_w_std = dataset.true_w.std(axis=0, ddof=1)
    for j in range(beta.size):
        suffix = "" if beta.size == 1 else f"_{j}"
        out[f"beta_hat{suffix}"] = (float(beta[j]), None if true_w_mean is None else float(true_w_mean[j]))
        out[f"sigma_b_hat{suffix}"] = (float(sigma_b[j]), None if true_w_std is None else float(true_w_std[j]))
    if model.config.identity_mode:
        first_obs = dataset.X[:, 0, 0]
        true_mu = true_sigma = None
        if dataset.true_z0 is not None and dataset.true_z0.shape[1] == 1:
            true_mu = float(dataset.true_z0.mean())
            true_sigma = float(dataset.true_z0.std(ddof=1))
        out["mu_hat"] = (float(first_obs.mean()), true_mu)
        out["sigma_hat"] = (float(first_obs.std(ddof=1)), true_sigma)
    return out


def param_mse(recovered: dict) -> float | None:
    """Mean squared error of the recovered parameters that have stored truth."""
    errs = [(est - truth) ** 2 for est, truth in recovered.values() if truth is not None]
    if not errs:
        return None
    return float(np.mean(errs))
