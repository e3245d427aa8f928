"""scikit-learn style front end for the trainer."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataio import MultiViewDataset
from .numerics import no_grad
from .trainer import TrainConfig, Trainer, recover_missing

_DEFAULTS = TrainConfig()


class BURG(ClusterMixin, TransformerMixin, BaseEstimator):
    """Incomplete multi-view clustering with flow-based missing-view recovery.

    ``fit`` takes a list of per-view arrays (one row per sample) and an
    optional ``(n_samples, n_views)`` availability mask; values in missing
    slots are ignored. Missing rows may also be given as all-NaN rows, in which
    case the mask is inferred.

    After fitting, ``labels_`` holds the cluster assignment and ``embedding_``
    the concatenated completed latents used for clustering.
    """

    def __init__(self, n_clusters=5, latent_dim=_DEFAULTS.latent_dim,
                 n_coupling_layers=_DEFAULTS.n_coupling_layers, encoder_hidden=(256, 128),
                 coupling_hidden=_DEFAULTS.coupling_hidden, activation=_DEFAULTS.activation,
                 learning_rate=_DEFAULTS.learning_rate, epochs_stage1=_DEFAULTS.epochs_stage1,
                 epochs_stage2=_DEFAULTS.epochs_stage2, epochs_stage3=_DEFAULTS.epochs_stage3,
                 batch_stage12=_DEFAULTS.batch_stage12, batch_stage3=_DEFAULTS.batch_stage3,
                 alpha=_DEFAULTS.alpha, beta=_DEFAULTS.beta, gamma=_DEFAULTS.gamma, tau=_DEFAULTS.tau,
                 scale_clamp=_DEFAULTS.scale_clamp, pc_entropy=_DEFAULTS.pc_entropy,
                 random_state=0):
        self.n_clusters = n_clusters
        self.latent_dim = latent_dim
        self.n_coupling_layers = n_coupling_layers
        self.encoder_hidden = encoder_hidden
        self.coupling_hidden = coupling_hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.epochs_stage3 = epochs_stage3
        self.batch_stage12 = batch_stage12
        self.batch_stage3 = batch_stage3
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.tau = tau
        self.scale_clamp = scale_clamp
        self.pc_entropy = pc_entropy
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        params = self.get_params()
        names = {f.name for f in fields(TrainConfig)}
        kwargs = {k: v for k, v in params.items() if k in names}
        kwargs["encoder_hidden"] = list(self.encoder_hidden)
        kwargs["seed"] = int(self.random_state)
        return TrainConfig(**kwargs)

    def _validate(self, views, mask, reset: bool) -> MultiViewDataset:
        if isinstance(views, np.ndarray) and views.ndim == 2:
            views = [views]
        views = [check_array(x, dtype=np.float64, ensure_all_finite="allow-nan") for x in views]
        if mask is None:
            mask = np.stack([~np.all(np.isnan(x), axis=1) for x in views], axis=1).astype(np.int64)
        else:
            mask = check_array(mask, dtype=None, ensure_2d=True)
        mask = np.asarray(mask)
        views = [np.where(mask[:, [v]] > 0, x, 0.0) if len(mask) == len(x) else x
                 for v, x in enumerate(views)]
        for v, x in enumerate(views):
            if not np.all(np.isfinite(x)):
                raise ValueError(f"view {v} has non-finite values in observed rows")
        if reset:
            self.n_views_in_ = len(views)
            self.view_dims_ = [x.shape[1] for x in views]
        elif [x.shape[1] for x in views] != self.view_dims_:
            raise ValueError(f"expected view dims {self.view_dims_}, got {[x.shape[1] for x in views]}")
        return MultiViewDataset(views, mask)

    def fit(self, X, y=None, mask=None):
        """Train all three stages on ``X`` (a list of view arrays)."""
        ds = self._validate(X, mask, reset=True)
        self.trainer_ = Trainer(ds, self._config()).fit()
        state = self.trainer_.recover_missing()
        self.embedding_ = state.embedding()
        self.labels_ = self.trainer_.predict()
        self.curves_ = list(self.trainer_.curves)
        self.schedule_ = dict(self.trainer_.schedule)
        # centroids in embedding space let ``predict`` assign new samples
        self.cluster_centers_ = np.stack([self.embedding_[self.labels_ == c].mean(axis=0)
                                          if np.any(self.labels_ == c) else np.zeros(self.embedding_.shape[1])
                                          for c in range(self.n_clusters)])
        return self

    def transform(self, X, mask=None):
        """Completed, concatenated latents for ``X`` under the fitted model."""
        check_is_fitted(self, "trainer_")
        ds = self._validate(X, mask, reset=False)
        with no_grad():
            state = recover_missing(ds, self.trainer_.model)
        return state.embedding()

    def predict(self, X, mask=None):
        """Nearest learned cluster centre for each sample of ``X``."""
        emb = self.transform(X, mask)
        d = ((emb[:, None, :] - self.cluster_centers_[None, :, :]) ** 2).sum(axis=2)
        return d.argmin(axis=1)

    def fit_predict(self, X, y=None, mask=None):
        return self.fit(X, y, mask=mask).labels_

    def fit_transform(self, X, y=None, mask=None):
        return self.fit(X, y, mask=mask).embedding_

