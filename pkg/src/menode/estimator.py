"""Estimator-style entry point around the train/calibrate/rollout pipeline.

Keeps the scikit-learn conventions (constructor stores hyperparameters
verbatim, ``fit`` returns ``self``, fitted state carries a trailing
underscore, ``get_params``/``set_params``/``clone`` work), so the model
drops into pipelines and grid searches that understand panel arrays.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .calibration import _rollout_values, calibrate_batch
from .data import PanelDataset
from .model import MeNodeModel, ModelConfig
from .ode import TimeGrid
from .training import TrainConfig, train
from .validation import check_panel_array, check_split_index, check_times


class MixedEffectsNeuralODE(BaseEstimator):
    """Panel-data forecaster: shared latent dynamics, one effect per subject.

    ``fit`` trains on the observed (pre-split) window of every subject;
    ``predict`` personalizes each new subject from its observed window
    and rolls the trajectory over the full training grid.
    """

    def __init__(self, latent_dim=1, mixed_dim=1, hidden_dim=16, identity_mode=False,
                 obs_sigma=0.1, identity_sigma0=0.05, sigma_b_init=0.1,
                 method="rk4", substeps=3, n_z0=10, n_w=10, accept_k=1,
                 learning_rate=1e-3, epochs=20, batch_size=64, kl_weight=1.0,
                 n_candidates=256, random_state=0):
        self.latent_dim = latent_dim
        self.mixed_dim = mixed_dim
        self.hidden_dim = hidden_dim
        self.identity_mode = identity_mode
        self.obs_sigma = obs_sigma
        self.identity_sigma0 = identity_sigma0
        self.sigma_b_init = sigma_b_init
        self.method = method
        self.substeps = substeps
        self.n_z0 = n_z0
        self.n_w = n_w
        self.accept_k = accept_k
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.kl_weight = kl_weight
        self.n_candidates = n_candidates
        self.random_state = random_state

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this estimator is not fitted yet; call fit first")

    def fit(self, X, y=None, times=None, split_index=None):
        """Train on trajectories ``X`` of shape (n_subjects, n_times, obs_dim).

        Only observations before ``split_index`` (default: half the grid)
        are used; the rest of the grid defines the forecast horizon.
        """
        X = check_panel_array(X)
        n_subjects, n_times, obs_dim = X.shape
        times = np.arange(n_times, dtype=np.float64) if times is None else check_times(times, n_times)
        split_index = check_split_index(n_times // 2 if split_index is None else split_index, n_times)

        dataset = PanelDataset(
            times=times,
            X=X,
            subject_ids=np.arange(n_subjects),
            group_ids=np.zeros(n_subjects, dtype=np.int64),
            split_index=split_index,
        )
        model_config = ModelConfig(
            latent_dim=self.latent_dim,
            mixed_dim=self.mixed_dim,
            obs_dim=obs_dim,
            n_obs_times=split_index,
            hidden_dim=self.hidden_dim,
            obs_sigma=self.obs_sigma,
            identity_mode=self.identity_mode,
            identity_sigma0=self.identity_sigma0,
            sigma_b_init=self.sigma_b_init,
            method=self.method,
            substeps=self.substeps,
        )
        train_config = TrainConfig(
            n_z0=self.n_z0,
            n_w=self.n_w,
            accept_k=self.accept_k,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            kl_weight=self.kl_weight,
        )
        self.model_ = MeNodeModel(model_config, seed=self.random_state)
        self.report_ = train(self.model_, dataset, train_config)
        self.times_ = times
        self.split_index_ = split_index
        return self

    def predict(self, X):
        """Calibrated full-grid trajectories from observed windows.

        ``X`` is (n_subjects, split_index, obs_dim) (a full-grid array is
        cut down to its observed window). Returns (n_subjects, n_times, obs_dim).
        """
        self._check_fitted()
        X = check_panel_array(X)
        cfg = self.model_.config
        if X.shape[1] >= self.times_.size:
            X = X[:, : self.split_index_, :]
        if X.shape[1] != cfg.n_obs_times or X.shape[2] != cfg.obs_dim:
            raise ValueError(
                f"predict expects windows ({cfg.n_obs_times}, {cfg.obs_dim}), got {X.shape[1:]}")
        grid_obs = TimeGrid(self.times_[: self.split_index_], substeps=cfg.substeps)
        grid_full = TimeGrid(self.times_, substeps=cfg.substeps)
        results = calibrate_batch(self.model_, X, grid_obs,
                                  n_candidates=self.n_candidates, seed=self.random_state)
        from .autodiff import Tensor

        mu, _ = self.model_.encode_rows(Tensor(X.reshape(X.shape[0], -1)))
        w_rows = np.stack([r.w for r in results])
        return _rollout_values(self.model_, mu.values, w_rows, grid_full)

    def score(self, X, y=None):
        """Negative mean squared error of the forecast against the full trajectories."""
        self._check_fitted()
        full = check_panel_array(X if y is None else y)
        pred = self.predict(full if y is None else check_panel_array(X))
        return -float(((full - pred) ** 2).mean())
