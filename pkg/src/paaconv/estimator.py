"""scikit-learn compatible wrappers.

``X`` for both estimators is either a single 2-D array or a list of them,
one per block. Columns 0-2 are the point positions in meters; the remaining
columns are the per-point features fed to the network.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidInputError
from .network import NetworkConfig, build_network
from .normals import DEFAULT_K, estimate_normals
from .training import TrainConfig, train


def check_block(X, min_features=4):
    """Validate one block: finite float64 array with positions in the first three columns."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1, ensure_all_finite=True)
    if X.shape[1] < min_features:
        raise InvalidInputError(
            f"expected at least {min_features} columns (x, y, z, features...), got {X.shape[1]}"
        )
    return X


def check_blocks(X, y=None, min_features=4):
    """Normalise ``X`` (and ``y``) to lists of blocks; returns ``(blocks, labels, single)``."""
    single = isinstance(X, np.ndarray) and X.ndim == 2
    blocks = [check_block(b, min_features) for b in ([X] if single else X)]
    if not blocks:
        raise InvalidInputError("no blocks given")
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise InvalidInputError(f"blocks disagree on column count: {sorted(widths)}")
    if y is None:
        return blocks, None, single
    labels = [np.asarray(l, dtype=np.int64).reshape(-1) for l in ([y] if single else y)]
    if len(labels) != len(blocks) or any(len(l) != len(b) for l, b in zip(labels, blocks)):
        raise InvalidInputError("y must give one label per point of every block")
    return blocks, labels, single


class _Block:
    __slots__ = ("positions", "features", "labels")

    def __init__(self, X, labels):
        self.positions = X[:, :3]
        self.features = X[:, 3:]
        self.labels = labels

    def __len__(self):
        return len(self.positions)


class PAAConvSegmenter(ClassifierMixin, BaseEstimator):
    """Per-point semantic segmentation with dilated cell-mean convolutions and attention gates.

    Parameters
    ----------
    n_classes : int or None, default=None
        Output classes; inferred as ``max(y) + 1`` when None.
    cascade_strides, cascade_channels : tuple of int
        Strides and widths of the cascade blocks (strides start at 1, non-decreasing).
    parallel_strides, parallel_channels : tuple of int
        Strides (strictly increasing) and widths of the parallel branches.
    cell_size : float, default=0.05
        Grid cell edge in meters.
    spatial_attention, channel_attention : bool, default=True
        Disable both to get the attention-free base model.
    learning_rate, momentum, batch_size, epochs :
        Mini-batch SGD with momentum settings; ``batch_size`` counts blocks.
    random_state : int, default=0
        Seeds initialisation and block shuffling.
    """

    def __init__(self, n_classes=None, cascade_strides=(1, 2, 3), cascade_channels=(32, 32, 64),
                 parallel_strides=(2, 4, 8), parallel_channels=(64, 64, 64), cell_size=0.05,
                 spatial_attention=True, channel_attention=True, learning_rate=0.01, momentum=0.9,
                 batch_size=4, epochs=200, random_state=0):
        self.n_classes = n_classes
        self.cascade_strides = cascade_strides
        self.cascade_channels = cascade_channels
        self.parallel_strides = parallel_strides
        self.parallel_channels = parallel_channels
        self.cell_size = cell_size
        self.spatial_attention = spatial_attention
        self.channel_attention = channel_attention
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        blocks, labels, _ = check_blocks(X, y)
        n_classes = self.n_classes or int(max(l.max() for l in labels)) + 1
        config = NetworkConfig(
            in_channels=blocks[0].shape[1] - 3, n_classes=n_classes,
            cascade_strides=self.cascade_strides, cascade_channels=self.cascade_channels,
            parallel_strides=self.parallel_strides, parallel_channels=self.parallel_channels,
            cell_size=self.cell_size, seed=self.random_state,
            spatial_attention=self.spatial_attention, channel_attention=self.channel_attention,
        )
        self.network_ = build_network(config)
        tcfg = TrainConfig(learning_rate=self.learning_rate, momentum=self.momentum,
                           batch_size=self.batch_size, epochs=self.epochs, seed=self.random_state)
        state = train(self.network_, [_Block(b, l) for b, l in zip(blocks, labels)], tcfg)
        self.history_ = state.history
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = blocks[0].shape[1]
        return self

    def _blocks(self, X):
        check_is_fitted(self, "network_")
        blocks, _, single = check_blocks(X)
        if blocks[0].shape[1] != self.n_features_in_:
            raise InvalidInputError(
                f"X has {blocks[0].shape[1]} columns, estimator was fitted with {self.n_features_in_}"
            )
        return blocks, single

    def decision_function(self, X):
        """Per-point logits; one (n, n_classes) array per block."""
        blocks, single = self._blocks(X)
        out = [self.network_.forward(b[:, :3], b[:, 3:]) for b in blocks]
        return out[0] if single else out

    def predict(self, X):
        scores = self.decision_function(X)
        if isinstance(scores, np.ndarray):
            return scores.argmax(axis=1)
        return [s.argmax(axis=1) for s in scores]

    def score(self, X, y, sample_weight=None):
        """Overall point accuracy across all blocks."""
        pred = self.predict(X)
        if isinstance(pred, np.ndarray):
            pred, y = [pred], [y]
        truth = np.concatenate([np.asarray(t).reshape(-1) for t in y])
        return float(np.mean(np.concatenate(pred) == truth))


class SurfaceNormalEstimator(TransformerMixin, BaseEstimator):
    """Append three oriented surface-normal columns to a point array.

    Parameters
    ----------
    k : int, default=16
        Neighbours per plane fit.
    center : tuple of float, default=(0, 0, 0)
        Normals are flipped to face this point.
    n_jobs : int, default=1
        Workers for the neighbour queries (-1: all cores).
    """

    def __init__(self, k=DEFAULT_K, center=(0.0, 0.0, 0.0), n_jobs=1):
        self.k = k
        self.center = center
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = check_block(X, min_features=3)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_block(X, min_features=3)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        normals, self.n_fallback_ = estimate_normals(X[:, :3], self.k, self.center, workers=self.n_jobs)
        return np.hstack([X, normals])
