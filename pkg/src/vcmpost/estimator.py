"""Scikit-learn style front end for the restoration model.

FeatureGuidedRestorer treats decoded frames as X and the matching raw
frames as y: fit() trains the network to pull detector-backbone
features of X toward those of y, transform() restores frames, and
score() reports the negative feature distance (higher is better). The
class follows the usual estimator conventions (constructor params are
plain fields, fitted state carries a trailing underscore, get_params
and clone just work).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .detector import ToyBackend
from .errors import ShapeMismatchError
from .frames import check_frame_stack
from .net import NetConfig, build_network, forward
from .training import (
    LossConfig,
    OptimizerState,
    TrainRun,
    feature_loss,
    step_rng,
    train_step,
)


class FeatureGuidedRestorer(BaseEstimator, TransformerMixin):
    """Learn to restore decoded frames under a detector-feature loss.

    Parameters mirror the network and trainer defaults at desk scale;
    pass a larger width or more blocks for heavier runs. X and y are
    (N, H, W, 3) float arrays in [0, 1] (or lists of frames).
    """

    def __init__(self, base_width=16, growth=8, num_rrdb=1,
                 dense_blocks_per_rrdb=3, dense_layers_per_block=5,
                 residual_scale=0.2, leaky_slope=0.2, lr=1e-5,
                 batch_size=8, max_steps=200, patch_size=48, seed=0):
        self.base_width = base_width
        self.growth = growth
        self.num_rrdb = num_rrdb
        self.dense_blocks_per_rrdb = dense_blocks_per_rrdb
        self.dense_layers_per_block = dense_layers_per_block
        self.residual_scale = residual_scale
        self.leaky_slope = leaky_slope
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.patch_size = patch_size
        self.seed = seed

    def _net_config(self) -> NetConfig:
        return NetConfig(
            base_width=self.base_width,
            growth=self.growth,
            num_rrdb=self.num_rrdb,
            dense_blocks_per_rrdb=self.dense_blocks_per_rrdb,
            dense_layers_per_block=self.dense_layers_per_block,
            residual_scale=self.residual_scale,
            leaky_slope=self.leaky_slope,
        )

    @staticmethod
    def _validate_pair(X, y):
        decoded = check_frame_stack(X, "X")
        raw = check_frame_stack(y, "y")
        if decoded.shape != raw.shape:
            raise ShapeMismatchError(
                f"X and y must align frame for frame: {decoded.shape} vs {raw.shape}"
            )
        return decoded, raw

    def fit(self, X, y):
        decoded, raw = self._validate_pair(X, y)
        config = self._net_config()
        config.validate()
        net = build_network(config, self.seed)
        backend = ToyBackend()
        state = OptimizerState.initial(
            [p.detach().numpy() for p in net.parameters()], lr=self.lr
        )
        run = TrainRun(
            net=net,
            optimizer=state,
            loss=LossConfig(backend=backend),
            batch_size=self.batch_size,
            max_steps=self.max_steps,
            seed=self.seed,
        )
        n, h, w = decoded.shape[0], decoded.shape[1], decoded.shape[2]
        size = min(self.patch_size, h, w)
        history = []
        for step in range(1, self.max_steps + 1):
            rng = step_rng(self.seed, step)
            batch = []
            for _ in range(self.batch_size):
                i = int(rng.integers(n))
                x0 = int(rng.integers(w - size + 1))
                y0 = int(rng.integers(h - size + 1))
                batch.append((
                    decoded[i, y0:y0 + size, x0:x0 + size],
                    raw[i, y0:y0 + size, x0:x0 + size],
                ))
            run, loss_value = train_step(run, batch)
            history.append(loss_value)
        self.net_ = net
        self.backend_ = backend
        self.loss_history_ = history
        self.n_steps_ = len(history)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(
                "this FeatureGuidedRestorer is not fitted yet; call fit first"
            )

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        frames = check_frame_stack(X, "X")
        return np.stack([forward(self.net_, frames[i]) for i in range(frames.shape[0])])

    def score(self, X, y) -> float:
        """Negative mean feature distance between transform(X) and y."""
        self._check_fitted()
        decoded, raw = self._validate_pair(X, y)
        cfg = LossConfig(backend=self.backend_)
        restored = self.transform(decoded)
        losses = [feature_loss(raw[i], restored[i], cfg) for i in range(raw.shape[0])]
        return -float(np.mean(losses))
