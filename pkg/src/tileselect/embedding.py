"""Core-set feature vectors from decoder feature maps.

A decoder map of shape (H, W, C) is reduced in two stages: a non-overlapping
max pool onto a g x g grid, then a global average over that grid, giving a
C-dimensional vector per tile.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_finite, check_ndim
from .exceptions import PreconditionError

DEFAULT_GRID = 8


def _as_feature_map(fmap, name="feature map"):
    fmap = np.asarray(fmap)
    check_ndim(fmap, 3, name)
    if min(fmap.shape) < 1:
        raise PreconditionError(f"{name} has an empty dimension: {fmap.shape}")
    return check_finite(fmap, name)


def grid_max_pool(fmap, grid_size=DEFAULT_GRID):
    """Max-pool an (H, W, C) map onto a ``grid_size x grid_size`` grid.

    Windows are non-overlapping with stride equal to their size, so H and W
    must both be divisible by ``grid_size``.
    """
    fmap = _as_feature_map(fmap)
    h, w, c = fmap.shape
    g = int(grid_size)
    if g < 1 or h % g or w % g:
        raise PreconditionError(
            f"map of size {h}x{w} cannot be split into a {g}x{g} grid"
        )
    return fmap.reshape(g, h // g, g, w // g, c).max(axis=(1, 3))


def global_avg_pool(fmap):
    """Per-channel mean over all spatial positions, accumulated in float64."""
    fmap = _as_feature_map(fmap)
    c = fmap.shape[2]
    means = fmap.reshape(-1, c).astype(np.float64).mean(axis=0)
    return means.astype(np.float32)


def embed_tile(fmap, grid_size=DEFAULT_GRID):
    return global_avg_pool(grid_max_pool(fmap, grid_size))


def embed_tiles(maps, grid_size=DEFAULT_GRID):
    """Embed a batch of maps, either an (N, H, W, C) array or an iterable."""
    if isinstance(maps, np.ndarray) and maps.ndim == 4:
        return np.stack([embed_tile(m, grid_size) for m in maps]) if len(maps) else (
            np.empty((0, maps.shape[3]), dtype=np.float32)
        )
    rows = [embed_tile(m, grid_size) for m in maps]
    if not rows:
        raise PreconditionError("no feature maps to embed")
    return np.stack(rows)


class TileEmbedder(TransformerMixin, BaseEstimator):
    """Stateless transformer turning decoder feature maps into embeddings.

    Parameters
    ----------
    grid_size : int, default=8
        Side of the intermediate max-pooled grid.

    Examples
    --------
    >>> import numpy as np
    >>> X = np.full((2, 16, 16, 4), 0.5, dtype=np.float32)
    >>> TileEmbedder(grid_size=8).fit_transform(X).shape
    (2, 4)
    """

    def __init__(self, grid_size=DEFAULT_GRID):
        self.grid_size = grid_size

    def fit(self, X, y=None):
        X = np.asarray(X)
        check_ndim(X, 4, "X")
        self.n_features_in_ = X.shape[3]
        return self

    def transform(self, X):
        X = np.asarray(X)
        check_ndim(X, 4, "X")
        return embed_tiles(X, self.grid_size)
