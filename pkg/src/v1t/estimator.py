"""Scikit-learn-style front door.

``V1TRegressor`` wraps dataset preprocessing, model construction, and
the training loop behind fit/predict/score with sklearn get_params
semantics, so the whole pipeline composes with ecosystem tooling
(cloning, parameter sweeps).  ``X`` is a dataset directory path or a
list of MouseRecord; there is no meaningful (n_samples, n_features)
matrix for a multi-animal core-readout model, so standard CV splitters
do not apply.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import CoreConfig, PreprocessConfig, TrainConfig
from .data import MouseRecord, apply_standardizer, fit_standardizer, load_dataset
from .evaluation import evaluate, single_trial_correlation
from .exceptions import DataError
from .model import V1TModel
from .training import fit as _fit
from .validation import check_array


class V1TRegressor(BaseEstimator):
    """Behavior-modulated transformer encoding model with Gaussian readouts.

    Parameters mirror the core architecture, preprocessing, and training
    recipe; defaults are the tuned reference values.  Desk-scale runs
    override the size parameters.
    """

    def __init__(self, mode="v1t", tokenizer="sliding_window", patch_size=8,
                 patch_stride=1, embed_dim=155, n_blocks=4, n_heads=4, mlp_dim=488,
                 patch_dropout=0.0229, mha_dropout=0.2544, mlp_dropout=0.2544,
                 stochastic_depth=0.0, lsa=False, positional="learned",
                 use_cls_token=False, bmlp_shared=False, bmlp_first_block_only=False,
                 vit_behavior_channels=True, pos_hidden_layers=1, pos_hidden_size=30,
                 readout_bias_init="zero", sigma_init=0.25, use_shifter=True,
                 alpha=1.0, target_h=36, target_w=64,
                 initial_lr=0.0016, lr_decay=0.3, patience=10, max_reductions=2,
                 max_epochs=200, batch_size=64, l1_core=0.5379, l1_readout=0.0076,
                 weight_decay=0.01, seed=0, verbose=False):
        self.mode = mode
        self.tokenizer = tokenizer
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.embed_dim = embed_dim
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.mlp_dim = mlp_dim
        self.patch_dropout = patch_dropout
        self.mha_dropout = mha_dropout
        self.mlp_dropout = mlp_dropout
        self.stochastic_depth = stochastic_depth
        self.lsa = lsa
        self.positional = positional
        self.use_cls_token = use_cls_token
        self.bmlp_shared = bmlp_shared
        self.bmlp_first_block_only = bmlp_first_block_only
        self.vit_behavior_channels = vit_behavior_channels
        self.pos_hidden_layers = pos_hidden_layers
        self.pos_hidden_size = pos_hidden_size
        self.readout_bias_init = readout_bias_init
        self.sigma_init = sigma_init
        self.use_shifter = use_shifter
        self.alpha = alpha
        self.target_h = target_h
        self.target_w = target_w
        self.initial_lr = initial_lr
        self.lr_decay = lr_decay
        self.patience = patience
        self.max_reductions = max_reductions
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.l1_core = l1_core
        self.l1_readout = l1_readout
        self.weight_decay = weight_decay
        self.seed = seed
        self.verbose = verbose

    # -- config assembly -------------------------------------------------------

    def core_config(self) -> CoreConfig:
        return CoreConfig(
            mode=self.mode, tokenizer=self.tokenizer, patch_size=self.patch_size,
            patch_stride=self.patch_stride, embed_dim=self.embed_dim,
            n_blocks=self.n_blocks, n_heads=self.n_heads, mlp_dim=self.mlp_dim,
            patch_dropout=self.patch_dropout, mha_dropout=self.mha_dropout,
            mlp_dropout=self.mlp_dropout, stochastic_depth=self.stochastic_depth,
            lsa=self.lsa, positional=self.positional, use_cls_token=self.use_cls_token,
            bmlp_shared=self.bmlp_shared, bmlp_first_block_only=self.bmlp_first_block_only,
            vit_behavior_channels=self.vit_behavior_channels,
            pos_hidden_layers=self.pos_hidden_layers, pos_hidden_size=self.pos_hidden_size,
            readout_bias_init=self.readout_bias_init, sigma_init=self.sigma_init,
            use_shifter=self.use_shifter).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.initial_lr, lr_decay=self.lr_decay, patience=self.patience,
            max_reductions=self.max_reductions, max_epochs=self.max_epochs,
            batch_size=self.batch_size, l1_core=self.l1_core,
            l1_readout=self.l1_readout, weight_decay=self.weight_decay,
            seed=self.seed).validate()

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(alpha=self.alpha, target_h=self.target_h,
                                target_w=self.target_w).validate()

    # -- estimator API ------------------------------------------------------------

    def _resolve_records(self, X) -> list[MouseRecord]:
        if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
            return load_dataset(X)
        records = list(X)
        if not records or not all(isinstance(r, MouseRecord) for r in records):
            raise DataError("X must be a dataset directory or a list of MouseRecord")
        return records

    def fit(self, X, y=None):
        """Fit on a dataset directory or list of raw MouseRecord."""
        records = self._resolve_records(X)
        pp = self.preprocess_config()
        self.standardizers_ = {r.mouse_id: fit_standardizer(r, pp) for r in records}
        transformed = [apply_standardizer(r, self.standardizers_[r.mouse_id]) for r in records]
        self.mouse_ids_ = [r.mouse_id for r in records]
        self.model_ = V1TModel.from_records(self.core_config(), transformed,
                                            standardizers=self.standardizers_,
                                            seed=self.seed)
        log = print if self.verbose else None
        self.fit_result_ = _fit(self.model_, transformed, self.train_config(), log=log)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this V1TRegressor instance is not fitted yet")

    def predict(self, images, behaviors, pupil_center, mouse_id) -> np.ndarray:
        """Predict responses for raw (unstandardized) inputs of one mouse."""
        self._check_fitted()
        std = self.standardizers_[mouse_id]
        images = check_array("images", images, ndim=4)
        behaviors = check_array("behaviors", behaviors, shape=(images.shape[0], 5))
        pupil_center = check_array("pupil_center", pupil_center, shape=(images.shape[0], 2))
        out = self.model_.forward(
            mouse_id,
            std.transform_images(images).astype(np.float32),
            std.transform_behaviors(behaviors).astype(np.float32),
            std.transform_pupil(pupil_center).astype(np.float32),
            train=False)
        return out.data.copy()

    def predict_record(self, record: MouseRecord, split: str = "test") -> np.ndarray:
        self._check_fitted()
        idx = record.trial_indices(split)
        return self.predict(record.images[idx], record.behaviors[idx],
                            record.pupil_center[idx], record.mouse_id)

    def score(self, X, y=None, split: str = "test") -> float:
        """Mean single-trial correlation over mice on the given split."""
        self._check_fitted()
        records = self._resolve_records(X)
        corr = []
        for rec in records:
            idx = rec.trial_indices(split)
            o = self.predict_record(rec, split)
            corr.append(single_trial_correlation(
                rec.responses[idx].astype(np.float64), o).mean_correlation)
        return float(np.mean(corr))

    def evaluate(self, X, split: str = "test", with_pupil_split: bool = False):
        """Full MetricsReport on standardized copies of the given records."""
        self._check_fitted()
        records = self._resolve_records(X)
        transformed = [apply_standardizer(r, self.standardizers_[r.mouse_id]) for r in records]
        return evaluate(self.model_, transformed, split=split,
                        batch_size=max(self.batch_size, 256),
                        with_pupil_split=with_pupil_split)
