"""Command-line interface: generate, train, calibrate, evaluate, sde-compare, gradcheck.

Artifacts written by this tool (CSV files, training logs, checkpoints,
reports) are byte-identical across reruns with the same arguments and
seed; timing information goes to stderr only. Exit codes: 0 success,
2 usage or contract violations, 3 unreadable or malformed data,
4 numeric divergence, 5 artifact integrity failures.

Config files are flat ``key=value`` lines (``#`` comments and blank
lines are ignored); keys are the field names of the relevant config
dataclasses and command-line flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import os
import sys
import time
import typing

import numpy as np

from .autodiff import Tensor
from .calibration import _rollout_values, calibrate_batch
from .checkpoint import load_checkpoint
from .data import ToySpec, generate_grouped_2d, generate_toy, read_csv, write_csv
from .errors import (
    EXIT_DATA,
    EXIT_DIVERGENCE,
    EXIT_INTEGRITY,
    EXIT_OK,
    EXIT_USAGE,
    ContractError,
    DataError,
    DivergenceError,
    DomainError,
    IntegrityError,
    UnsupportedVersionError,
    UsageError,
)
from .metrics import EvalReport, param_mse, per_step_mse, permutation_test, recovered_params
from .model import MeNodeModel, ModelConfig
from .ode import TimeGrid, integrate, integrate_stratonovich, wong_zakai_ensemble
from .training import TrainConfig, elbo_gradient_check, train

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_TOY_KEYS = {f.name for f in dataclasses.fields(ToySpec)}
_GROUPED_TYPES = {"n_groups": int, "n_subjects": int, "noise_sigma": float,
                  "n_times": int, "t_max": float}


def _fmt(value) -> str:
    return format(float(value), ".17g")


def _check_threads():
    """Validate MENODE_THREADS. All computation here is single-threaded,
    so any positive bound is honored; a malformed value is a usage error."""
    raw = os.environ.get("MENODE_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MENODE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MENODE_THREADS must be a positive integer, got {raw!r}")


def read_config_file(path) -> dict:
    """Parse a flat key=value config file into a {key: raw string} dict."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise UsageError(f"{path}:{line_no}: empty key")
            if key in values:
                raise UsageError(f"{path}:{line_no}: duplicate key {key!r}")
            values[key] = value
    return values


def _coerce(key: str, raw: str, typ):
    if typ is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r} expects {typ.__name__}, got {raw!r}") from None


def _split_file_values(file_values: dict, sections: dict) -> dict:
    """Assign raw config values to named key sets and coerce them.

    ``sections`` maps a section name to (key set, {key: type}); a key
    belonging to no section is a usage error listing what is allowed.
    """
    out = {name: {} for name in sections}
    for key, raw in file_values.items():
        for name, (keys, types) in sections.items():
            if key in keys:
                out[name][key] = _coerce(key, raw, types[key])
                break
        else:
            allowed = sorted(set().union(*(keys for keys, _ in sections.values())))
            raise UsageError(f"unknown config key {key!r}; allowed keys: {', '.join(allowed)}")
    return out


def _select_split(dataset, train_frac, split: str):
    if split == "all":
        return dataset
    if train_frac is None:
        raise UsageError(f"--split {split} requires --train-frac")
    train_set, test_set = dataset.train_test_split(train_frac)
    return train_set if split == "train" else test_set


def _check_model_data(model: MeNodeModel, dataset):
    cfg = model.config
    if dataset.split_index != cfg.n_obs_times or dataset.obs_dim != cfg.obs_dim:
        raise UsageError(
            f"checkpoint expects observed windows ({cfg.n_obs_times}, {cfg.obs_dim}) but the data "
            f"provides ({dataset.split_index}, {dataset.obs_dim})")


# -- generate ----------------------------------------------------------------

_TOY_ONLY_FLAGS = ("mu", "sigma", "beta", "sigma_b", "train_frac")
_GROUPED_ONLY_FLAGS = ("n_groups", "noise_sigma")
_GROUPED_DEFAULTS = {"n_groups": 4, "n_subjects": 200, "noise_sigma": 0.01,
                     "n_times": 20, "t_max": 2.0}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _cmd_generate(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    if args.dataset == "toy":
        bad = [_flag(n) for n in _GROUPED_ONLY_FLAGS if getattr(args, n) is not None]
        if bad:
            raise UsageError(f"{', '.join(bad)} apply to --dataset grouped2d only")
        kwargs = _split_file_values(
            file_values, {"toy": (_TOY_KEYS, typing.get_type_hints(ToySpec))})["toy"]
        for name in _TOY_KEYS:
            value = getattr(args, name)
            if value is not None:
                kwargs[name] = value
        dataset = generate_toy(ToySpec(**kwargs), seed=args.seed, jitter=args.jitter)
    else:
        bad = [_flag(n) for n in _TOY_ONLY_FLAGS if getattr(args, n) is not None]
        if bad:
            raise UsageError(f"{', '.join(bad)} apply to --dataset toy only")
        if args.jitter:
            raise UsageError("--jitter applies to the toy dataset only")
        kwargs = _split_file_values(
            file_values, {"grouped2d": (set(_GROUPED_TYPES), _GROUPED_TYPES)})["grouped2d"]
        merged = {**_GROUPED_DEFAULTS, **kwargs}
        for name in _GROUPED_DEFAULTS:
            value = getattr(args, name)
            if value is not None:
                merged[name] = value
        dataset = generate_grouped_2d(
            merged["n_groups"], merged["n_subjects"], seed=args.seed,
            noise_sigma=merged["noise_sigma"], n_times=merged["n_times"], t_max=merged["t_max"])
    write_csv(dataset, args.out)
    print(f"wrote {args.out}: {dataset.n_subjects} subjects, {dataset.n_times} times, "
          f"split at {dataset.split_index}")
    return EXIT_OK


# -- train -------------------------------------------------------------------

_MODEL_FLAGS = ("latent_dim", "mixed_dim", "hidden_dim", "obs_sigma", "identity_sigma0",
                "sigma_b_init", "method", "substeps")
_TRAIN_FLAGS = ("n_z0", "n_w", "accept_k", "learning_rate", "epochs", "batch_size", "kl_weight")


def _cmd_train(args) -> int:
    if args.checkpoint_every < 0:
        raise UsageError(f"--checkpoint-every must be >= 0, got {args.checkpoint_every}")
    dataset = read_csv(args.data)
    if args.train_frac is not None:
        dataset, _ = dataset.train_test_split(args.train_frac)

    file_values = read_config_file(args.config) if args.config else {}
    sections = {
        "model": (_MODEL_KEYS, typing.get_type_hints(ModelConfig)),
        "train": (_TRAIN_KEYS, typing.get_type_hints(TrainConfig)),
    }
    parts = _split_file_values(file_values, sections)
    model_kwargs, train_kwargs = parts["model"], parts["train"]

    for name in _TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            train_kwargs[name] = value
    train_kwargs["seed"] = args.seed
    train_config = TrainConfig(**train_kwargs)

    for name in _MODEL_FLAGS:
        value = getattr(args, name)
        if value is not None:
            model_kwargs[name] = value
    if args.identity:
        model_kwargs["identity_mode"] = True

    if args.resume is not None:
        loaded = load_checkpoint(args.resume)
        model = loaded.model
        optimizer, rng, start_epoch = loaded.optimizer, loaded.rng, loaded.epoch
        stored = model.to_config_dict()
        for key, value in model_kwargs.items():
            if stored.get(key) != value:
                raise UsageError(
                    f"model setting {key}={value} conflicts with the checkpoint's {stored.get(key)}; "
                    f"resumed runs keep the stored architecture")
        if train_config.epochs <= start_epoch:
            raise UsageError(
                f"checkpoint already covers epoch {start_epoch}; set --epochs above it")
    else:
        for name, actual in (("obs_dim", dataset.obs_dim), ("n_obs_times", dataset.split_index)):
            if name in model_kwargs and model_kwargs[name] != actual:
                raise UsageError(
                    f"config sets {name}={model_kwargs[name]} but the data has {name}={actual}")
            model_kwargs[name] = actual
        model = MeNodeModel(ModelConfig(**model_kwargs), seed=args.seed)
        optimizer = rng = None
        start_epoch = 0

    log_fh = None
    log_stream = sys.stdout
    if args.log is not None:
        log_fh = open(args.log, "w", encoding="utf-8", newline="\n")
        log_stream = log_fh
    try:
        report = train(model, dataset, train_config, log_stream=log_stream,
                       checkpoint_path=args.checkpoint, checkpoint_every=args.checkpoint_every,
                       optimizer=optimizer, rng=rng, start_epoch=start_epoch, quiet=args.quiet)
    finally:
        if log_fh is not None:
            log_fh.close()
    if args.log is not None:
        print(f"trained {len(report.epochs)} epochs, wrote {args.checkpoint}")
    return EXIT_OK


# -- calibrate ---------------------------------------------------------------

def _calibrated_rollouts(model: MeNodeModel, dataset, n_candidates: int, seed: int,
                         search_z0: bool):
    """Calibrate every subject on its observed window and roll the full grid.

    Returns (calibration results, posterior-mean z0 rows, decoded
    predictions of shape (n_subjects, n_times, obs_dim)).
    """
    cfg = model.config
    grid_obs = TimeGrid(dataset.interp_times, substeps=cfg.substeps)
    grid_full = TimeGrid(dataset.times, substeps=cfg.substeps)
    results = calibrate_batch(model, dataset.X_interp, grid_obs,
                              n_candidates=n_candidates, seed=seed, search_z0=search_z0)
    mu, _ = model.encode_rows(Tensor(dataset.X_interp.reshape(dataset.n_subjects, -1)))
    w_rows = np.stack([r.w for r in results])
    preds = _rollout_values(model, mu.values, w_rows, grid_full)
    return results, mu.values, w_rows, preds


def _write_calibration_csv(path, dataset, results, preds):
    mixed_dim = results[0].w.size
    obs_dim = preds.shape[2]
    header = ["subject_id", "time", "split"]
    header += [f"w_{j}" for j in range(mixed_dim)] + ["cal_mse"]
    header += [f"pred_{k}" for k in range(obs_dim)]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for i in range(dataset.n_subjects):
        w_txt = [_fmt(v) for v in results[i].w]
        mse_txt = _fmt(results[i].mse)
        for t_idx in range(dataset.n_times):
            row = [str(int(dataset.subject_ids[i])), _fmt(dataset.times[t_idx]),
                   "interp" if t_idx < dataset.split_index else "extrap"]
            row += w_txt + [mse_txt]
            row += [_fmt(v) for v in preds[i, t_idx]]
            buf.write(",".join(row) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _cmd_calibrate(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    dataset = _select_split(read_csv(args.data), args.train_frac, args.split)
    _check_model_data(model, dataset)
    results, _, _, preds = _calibrated_rollouts(
        model, dataset, args.n_candidates, args.seed, args.search_z0)
    _write_calibration_csv(args.out, dataset, results, preds)
    print(f"calibrated {dataset.n_subjects} subjects with {args.n_candidates} candidates, "
          f"wrote {args.out}")
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------

def _latent_rollouts(model: MeNodeModel, z0_rows: np.ndarray, w_rows: np.ndarray,
                     grid: TimeGrid) -> np.ndarray:
    """Latent trajectories (no decoding) for fixed (z0, w) rows, shape (B, T, p)."""
    with np.errstate(over="ignore", invalid="ignore"):
        traj = integrate(model.drift_rows, Tensor(z0_rows), Tensor(w_rows), grid,
                         method=model.config.method, check_finite=False)
    return traj.values.transpose(1, 0, 2)


def _write_per_step_csv(path, interp, extrap):
    buf = io.StringIO()
    buf.write("split,time,mse_mean,mse_std\n")
    for name, block in (("interp", interp), ("extrap", extrap)):
        for t, m, s in zip(block.times, block.mean, block.std):
            buf.write(f"{name},{_fmt(t)},{_fmt(m)},{_fmt(s)}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _write_p_values_csv(path, times, result):
    buf = io.StringIO()
    buf.write("step,time,observed,p_value\n")
    if result is not None:
        for idx, obs, p in zip(result.times_index, result.observed, result.p_values):
            buf.write(f"{int(idx)},{_fmt(times[int(idx)])},{_fmt(obs)},{_fmt(p)}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def _cmd_evaluate(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.checkpoint).model
    dataset = _select_split(read_csv(args.data), args.train_frac, args.split)
    _check_model_data(model, dataset)

    results, z0_rows, w_rows, preds = _calibrated_rollouts(
        model, dataset, args.n_candidates, args.seed, args.search_z0)
    split = dataset.split_index
    interp = per_step_mse(dataset.interp_times, dataset.X_interp, preds[:, :split])
    extrap = per_step_mse(dataset.extrap_times, dataset.X_extrap, preds[:, split:])
    recon = float(np.mean([r.mse for r in results]))
    recovered = recovered_params(model, dataset)

    p_result = None
    if args.permutation:
        grid_full = TimeGrid(dataset.times, substeps=model.config.substeps)
        latents = _latent_rollouts(model, z0_rows, w_rows, grid_full)
        mask_a = dataset.group_ids == args.group_a
        mask_b = dataset.group_ids == args.group_b
        for gid, mask in ((args.group_a, mask_a), (args.group_b, mask_b)):
            if mask.sum() < 2:
                raise UsageError(f"group {gid} has fewer than 2 subjects; "
                                 f"cannot run the permutation test")
        p_result = permutation_test(latents[mask_a], latents[mask_b],
                                    n_perms=args.n_perms, seed=args.seed)

    report = EvalReport(interp=interp, extrap=extrap, recon_mse=recon, recovered=recovered,
                        param_mse=param_mse(recovered), p_values=p_result,
                        wall_clock_seconds=time.perf_counter() - started)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.render())
    _write_per_step_csv(os.path.join(args.out_dir, "per_step_mse.csv"), interp, extrap)
    _write_p_values_csv(os.path.join(args.out_dir, "p_values.csv"), dataset.times, p_result)
    sys.stdout.write(report.render())
    print(f"evaluate took {report.wall_clock_seconds:.2f}s", file=sys.stderr)
    return EXIT_OK


# -- sde-compare -------------------------------------------------------------

def _cmd_sde_compare(args) -> int:
    if args.n_times < 2:
        raise UsageError(f"--n-times must be >= 2, got {args.n_times}")
    if args.t_max <= 0:
        raise UsageError(f"--t-max must be > 0, got {args.t_max}")
    if args.n_paths < 2:
        raise UsageError(f"--n-paths must be >= 2, got {args.n_paths}")
    if args.sigma < 0:
        raise UsageError(f"--sigma must be >= 0, got {args.sigma}")
    mu, sigma, z0 = args.mu, args.sigma, args.z0
    times = np.linspace(0.0, args.t_max, args.n_times)
    grid = TimeGrid(times, substeps=args.substeps)

    def drift(z, t):
        return mu * z

    if args.noise == "multiplicative":
        def noise(z, t):
            return sigma * z
    else:
        def noise(z, t):
            return np.full_like(z, sigma)

    frozen = wong_zakai_ensemble(drift, noise, z0, grid, n_paths=args.n_paths,
                                 seed=args.seed, method=args.method)
    paths = integrate_stratonovich(drift, noise, z0, grid, seed=args.seed + 1,
                                   n_paths=args.n_paths)
    sde_mean = paths.mean(axis=0)
    sde_var = paths.var(axis=0, ddof=1)

    # closed-form moments; the frozen-amplitude ensemble and the true
    # Stratonovich solution agree at small t and drift apart as t grows
    t = times
    if args.noise == "multiplicative":
        ode_mean_exact = z0 * np.exp(mu * t + 0.5 * sigma ** 2 * t ** 2)
        ode_var_exact = z0 ** 2 * np.exp(2 * mu * t) * (
            np.exp(2 * sigma ** 2 * t ** 2) - np.exp(sigma ** 2 * t ** 2))
        sde_mean_exact = z0 * np.exp(mu * t + 0.5 * sigma ** 2 * t)
        sde_var_exact = z0 ** 2 * np.exp(2 * mu * t + sigma ** 2 * t) * (
            np.exp(sigma ** 2 * t) - 1.0)
    else:
        growth = np.exp(mu * t)
        if abs(mu) < 1e-12:
            ramp = t
            sde_var_exact = sigma ** 2 * t
        else:
            ramp = (growth - 1.0) / mu
            sde_var_exact = sigma ** 2 * (np.exp(2 * mu * t) - 1.0) / (2 * mu)
        ode_mean_exact = z0 * growth
        sde_mean_exact = z0 * growth
        ode_var_exact = sigma ** 2 * ramp ** 2

    n_ode = frozen.n_paths - frozen.n_diverged
    ode_se = np.sqrt(frozen.var / n_ode)
    sde_se = np.sqrt(sde_var / paths.shape[0])
    z_ode = np.where(ode_se > 0, np.abs(frozen.mean - ode_mean_exact) / np.where(ode_se > 0, ode_se, 1.0), 0.0)
    z_sde = np.where(sde_se > 0, np.abs(sde_mean - sde_mean_exact) / np.where(sde_se > 0, sde_se, 1.0), 0.0)
    max_z_ode = float(z_ode[1:].max()) if times.size > 1 else 0.0
    max_z_sde = float(z_sde[1:].max()) if times.size > 1 else 0.0

    print(f"{'time':>10} {'ode_mean':>14} {'ode_exact':>14} {'sde_mean':>14} {'sde_exact':>14}")
    for k in range(times.size):
        print(f"{times[k]:10.4f} {frozen.mean[k]:14.8f} {ode_mean_exact[k]:14.8f} "
              f"{sde_mean[k]:14.8f} {sde_mean_exact[k]:14.8f}")
    print(f"frozen-noise paths: {frozen.n_paths}, diverged: {frozen.n_diverged}")
    print(f"max |mean - exact| / se: ode={max_z_ode:.3f} sde={max_z_sde:.3f}")

    if args.out is not None:
        buf = io.StringIO()
        buf.write("time,ode_mean,ode_var,ode_mean_exact,ode_var_exact,ode_se,"
                  "sde_mean,sde_var,sde_mean_exact,sde_var_exact,sde_se\n")
        for k in range(times.size):
            vals = (times[k], frozen.mean[k], frozen.var[k], ode_mean_exact[k], ode_var_exact[k],
                    ode_se[k], sde_mean[k], sde_var[k], sde_mean_exact[k], sde_var_exact[k],
                    sde_se[k])
            buf.write(",".join(_fmt(v) for v in vals) + "\n")
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(buf.getvalue())
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------

def _cmd_gradcheck(args) -> int:
    cfg = ModelConfig(
        latent_dim=args.latent_dim,
        mixed_dim=args.mixed_dim,
        obs_dim=args.obs_dim,
        n_obs_times=args.n_obs_times,
        hidden_dim=args.hidden_dim,
        identity_mode=args.identity,
        method=args.method,
        substeps=args.substeps,
    )
    model = MeNodeModel(cfg, seed=args.seed)
    train_cfg = TrainConfig(n_z0=args.n_z0, n_w=args.n_w, accept_k=args.accept_k, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    times = np.linspace(0.0, 1.0, args.n_obs_times)
    if args.identity:
        z0 = 1.0 + 0.1 * rng.standard_normal()
        w = 0.3 + 0.05 * rng.standard_normal()
        x_win = (z0 * np.exp(w * times))[:, None]
    else:
        x_win = 0.5 * rng.standard_normal((args.n_obs_times, args.obs_dim))
    grid = TimeGrid(times, substeps=cfg.substeps)

    worst, table = elbo_gradient_check(model, x_win, grid, train_cfg, h=args.step)
    tolerance = args.tolerance
    if tolerance is None:
        tolerance = 1e-3 if args.identity else 1e-2
    for name in sorted(table):
        print(f"{name} rel_err={table[name]:.3e}")
    status = "PASS" if worst < tolerance else "FAIL"
    mode = "identity" if args.identity else "mlp"
    print(f"gradcheck mode={mode} max_rel_err={worst:.3e} tolerance={tolerance:g} {status}")
    return EXIT_OK if status == "PASS" else EXIT_DIVERGENCE


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="menode",
        description="Mixed-effects neural ODEs for panel data: train a shared dynamics "
                    "model with per-subject effects, personalize it, and score forecasts.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic panel dataset as CSV")
    p.add_argument("--dataset", choices=("toy", "grouped2d"), default="toy")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="flat key=value file; flags override it")
    p.add_argument("--jitter", action="store_true", help="jitter interior grid times (toy only)")
    p.add_argument("--mu", type=float, default=None, help="toy: mean initial state")
    p.add_argument("--sigma", type=float, default=None, help="toy: initial-state spread")
    p.add_argument("--beta", type=float, default=None, help="toy: mean growth effect")
    p.add_argument("--sigma-b", type=float, default=None, help="toy: growth-effect spread")
    p.add_argument("--train-frac", type=float, default=None, help="toy: leading train fraction")
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--n-times", type=int, default=None)
    p.add_argument("--t-max", type=float, default=None)
    p.add_argument("--n-groups", type=int, default=None, help="grouped2d: number of groups")
    p.add_argument("--noise-sigma", type=float, default=None, help="grouped2d: observation noise")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="fit the model on a dataset CSV")
    p.add_argument("--data", required=True, help="dataset CSV from the generate command")
    p.add_argument("--checkpoint", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", default=None, help="flat key=value file; flags override it")
    p.add_argument("--log", default=None, help="write per-epoch lines here instead of stdout")
    p.add_argument("--train-frac", type=float, default=None,
                   help="train on the leading fraction of subjects")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also checkpoint every N epochs (0: only at the end)")
    p.add_argument("--resume", default=None, help="continue training from this checkpoint")
    p.add_argument("--identity", action="store_true",
                   help="1-D closed-form mode: only beta and sigma_b are learned")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch timing on stderr")
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--mixed-dim", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--obs-sigma", type=float, default=None)
    p.add_argument("--identity-sigma0", type=float, default=None)
    p.add_argument("--sigma-b-init", type=float, default=None)
    p.add_argument("--method", choices=("euler", "rk4"), default=None)
    p.add_argument("--substeps", type=int, default=None)
    p.add_argument("--n-z0", type=int, default=None, help="initial-state draws per subject")
    p.add_argument("--n-w", type=int, default=None, help="effect draws per initial state")
    p.add_argument("--accept-k", type=int, default=None, help="closest candidates kept")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--kl-weight", type=float, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("calibrate",
                       help="pick a per-subject effect from its observed window and predict")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--n-candidates", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--search-z0", action="store_true",
                   help="also sample the initial state instead of pinning its posterior mean")
    p.add_argument("--train-frac", type=float, default=None)
    p.add_argument("--split", choices=("train", "test", "all"), default="all",
                   help="which side of the leading-fraction split to use")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("evaluate", help="score forecasts and parameter recovery")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True,
                   help="directory for report.txt, per_step_mse.csv, p_values.csv")
    p.add_argument("--n-candidates", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--search-z0", action="store_true")
    p.add_argument("--train-frac", type=float, default=None)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--permutation", action="store_true",
                   help="permutation-test the latent trajectories of two groups")
    p.add_argument("--n-perms", type=int, default=499)
    p.add_argument("--group-a", type=int, default=0)
    p.add_argument("--group-b", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sde-compare",
                       help="frozen-noise ensemble ODE vs Stratonovich SDE moments")
    p.add_argument("--mu", type=float, default=0.3, help="drift coefficient")
    p.add_argument("--sigma", type=float, default=0.1, help="noise coefficient")
    p.add_argument("--z0", type=float, default=1.0)
    p.add_argument("--t-max", type=float, default=2.0)
    p.add_argument("--n-times", type=int, default=21)
    p.add_argument("--substeps", type=int, default=3)
    p.add_argument("--n-paths", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=("euler", "rk4"), default="rk4")
    p.add_argument("--noise", choices=("multiplicative", "additive"), default="multiplicative")
    p.add_argument("--out", default=None, help="also write the moment table as CSV")
    p.set_defaults(func=_cmd_sde_compare)

    p = sub.add_parser("gradcheck",
                       help="compare loss gradients against central differences")
    p.add_argument("--identity", action="store_true")
    p.add_argument("--latent-dim", type=int, default=1)
    p.add_argument("--mixed-dim", type=int, default=1)
    p.add_argument("--obs-dim", type=int, default=1)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--n-obs-times", type=int, default=10)
    p.add_argument("--substeps", type=int, default=3)
    p.add_argument("--method", choices=("euler", "rk4"), default="rk4")
    p.add_argument("--n-z0", type=int, default=3)
    p.add_argument("--n-w", type=int, default=3)
    p.add_argument("--accept-k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=None,
                   help="default 1e-3 in identity mode, 1e-2 otherwise")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        _check_threads()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return EXIT_OK
        return code if isinstance(code, int) else EXIT_USAGE
    except (UsageError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, DomainError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (IntegrityError, UnsupportedVersionError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
