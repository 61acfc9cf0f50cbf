"""scikit-learn style estimator around :func:`neubrdf.train.fit`.

Rows of ``X`` are ``(theta_i, phi_i, theta_o, phi_o)`` in radians, optionally
followed by ``(u, v)`` when a neural texture is configured; targets are
linear RGB reflectance.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .brdf_data import BidirSamples
from .healpix import SphereCoord
from .sphgrid import prune as _prune
from .train import ModelConfig, TrainConfig, fit

__all__ = ["NeuBRDFRegressor", "check_directions"]


def check_directions(X, with_uv: bool | None = None) -> np.ndarray:
    """Validate an ``(N, 4)`` or ``(N, 6)`` direction table.

    Colatitudes must lie in ``[0, pi]``; uv columns, when present, must be finite.
    """
    X = check_array(X, dtype=np.float64)
    if X.shape[1] not in (4, 6):
        raise ValueError(f"expected 4 or 6 columns, got {X.shape[1]}")
    if with_uv is not None and (X.shape[1] == 6) != with_uv:
        raise ValueError("uv columns must be present exactly when a texture is configured")
    for col in (0, 2):
        if np.any(X[:, col] < 0) or np.any(X[:, col] > np.pi):
            raise ValueError("colatitudes must lie in [0, pi]")
    return X


def _samples(X, y=None) -> BidirSamples:
    rgb = np.zeros((len(X), 3)) if y is None else y
    uv = X[:, 4:6] if X.shape[1] == 6 else None
    return BidirSamples(SphereCoord(X[:, 0], X[:, 1]), SphereCoord(X[:, 2], X[:, 3]), rgb, uv)


class NeuBRDFRegressor(RegressorMixin, BaseEstimator):
    """Codebook-quantized spherical grid + MLP reflectance regressor.

    Parameters mirror :class:`~neubrdf.train.ModelConfig` and
    :class:`~neubrdf.train.TrainConfig`; ``prune=True`` drops grid vertices
    the training directions never touch.

    Attributes:
        model_: the fitted :class:`~neubrdf.model.NeuBrdfModel`.
        report_: the :class:`~neubrdf.train.TrainReport` of the fit.
    """

    def __init__(self, nside=16, k=16, bitwidth=9, quantize=True, isotropic=False,
                 texture_shape=None, epochs=30, batch_size=2 ** 14, lr=1e-2, loss="log_l1",
                 seed=0, dtype="float32", prune=False):
        self.nside = nside
        self.k = k
        self.bitwidth = bitwidth
        self.quantize = quantize
        self.isotropic = isotropic
        self.texture_shape = texture_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.loss = loss
        self.seed = seed
        self.dtype = dtype
        self.prune = prune

    def _configs(self):
        mc = ModelConfig(nside=self.nside, k=self.k, bitwidth=self.bitwidth,
                         quantize=self.quantize, isotropic=self.isotropic,
                         texture_shape=self.texture_shape)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                         loss=self.loss, seed=self.seed, dtype=self.dtype)
        return mc, tc

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        X = check_directions(X, with_uv=self.texture_shape is not None)
        y = np.asarray(y).reshape(len(X), -1)
        if y.shape[1] != 3:
            raise ValueError("targets must have 3 columns (RGB)")
        mc, tc = self._configs()
        data = _samples(X, y)
        model, report = fit(data, mc, tc)
        if self.prune:
            from .brdf_data import isotropic_reparam
            wi, wo = (isotropic_reparam(data.wi, data.wo) if self.isotropic
                      else (data.wi, data.wo))
            model = model.copy()
            model.grid = _prune(model.grid, wi, wo)
        self.model_ = model
        self.report_ = report
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_directions(X, with_uv=self.model_.texture is not None)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return _samples(X)

    def predict(self, X) -> np.ndarray:
        """Reflectance ``(N, 3)``."""
        s = self._check(X)
        return self.model_.eval(s.wi, s.wo, s.uv)

    def transform(self, X) -> np.ndarray:
        """Runtime MLP inputs: blended grid primitives (and texture features)."""
        s = self._check(X)
        return self.model_.features(s.wi, s.wo, s.uv)
