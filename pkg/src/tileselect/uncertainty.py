"""MC-dropout uncertainty scores and mean-intensity pre-selection."""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_fraction, check_ndim, check_unit_interval
from .exceptions import MissingArtifactError, PreconditionError
from .tensor_store import SelectionManifest, read_tensor

DEFAULT_FRACTION = 0.05
DEFAULT_SAMPLES = 10


def _as_stack(stack):
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise PreconditionError(
            f"score stack must be (T, H, W), got shape {stack.shape}"
        )
    if stack.shape[0] < 2:
        raise PreconditionError(
            f"variance needs at least 2 stochastic maps, got {stack.shape[0]}"
        )
    return check_unit_interval(stack, "score stack")


def pixel_variance(stack):
    """Population variance across the T stochastic maps, per pixel.

    Accepts a (T, H, W) array or a sequence of equally shaped (H, W) maps.
    """
    if not isinstance(stack, np.ndarray):
        shapes = {np.shape(m) for m in stack}
        if len(shapes) > 1:
            raise PreconditionError(f"maps in stack differ in shape: {sorted(shapes)}")
    stack = _as_stack(stack).astype(np.float64)
    # shifted data: exact zeros for identical maps, less cancellation
    dev = stack - stack[0]
    mean = dev.mean(axis=0)
    return ((dev - mean) ** 2).mean(axis=0)


def mc_dropout_score(stack):
    """Mean of the per-pixel variance map; in [0, 0.25] for maps in [0, 1]."""
    return float(pixel_variance(stack).mean())


def mean_intensity(prob_map):
    prob_map = np.asarray(prob_map)
    if prob_map.size == 0:
        raise PreconditionError("empty map")
    check_unit_interval(prob_map, "segmentation map")
    return float(prob_map.astype(np.float64).mean())


def rank_by_intensity(tile_ids, intensities):
    """Indices ordering tiles by intensity descending, tile_id ascending."""
    ids = np.asarray(tile_ids, dtype=str)
    vals = np.asarray(intensities, dtype=np.float64)
    return np.lexsort((ids, -vals))


def preselect_count(n, fraction):
    # the small epsilon keeps 0.05 * 100 from rounding up to 6
    return min(n, max(1, math.ceil(check_fraction(fraction) * n - 1e-9)))


def preselect_scores(tile_ids, intensities, fraction=DEFAULT_FRACTION, created_at=None):
    """Pre-select from precomputed intensities. See :func:`preselect`."""
    tile_ids = list(tile_ids)
    n = len(tile_ids)
    if n == 0:
        raise PreconditionError("cannot pre-select from an empty catalog")
    if len(intensities) != n:
        raise PreconditionError("intensities and tile ids are misaligned")
    m = preselect_count(n, fraction)
    order = rank_by_intensity(tile_ids, intensities)[:m]
    selected = [(tile_ids[i], float(intensities[i])) for i in order]
    kwargs = {} if created_at is None else {"created_at": created_at}
    return SelectionManifest("preselect", m, 0, selected, **kwargs)


def intensity_map_for(record):
    """The map used for pre-selection: the dedicated mean map, else stack map 0."""
    if record.mean_map_path:
        _, data = read_tensor(record.mean_map_path)
        if data.ndim == 3 and data.shape[0] == 1:
            data = data[0]
        check_ndim(data, 2, f"mean map of {record.tile_id}")
        return data
    if record.score_stack_path:
        _, data = read_tensor(record.score_stack_path)
        check_ndim(data, 3, f"score stack of {record.tile_id}")
        return data[0]
    raise MissingArtifactError(f"tile {record.tile_id} has no mean map or score stack")


def _map_records(fn, records, threads):
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, records))
    return [fn(r) for r in records]


def catalog_intensities(records, threads=None):
    return _map_records(lambda r: mean_intensity(intensity_map_for(r)), records, threads)


def catalog_scores(records, threads=None):
    def score(rec):
        _, stack = read_tensor(rec.score_stack_path)
        return mc_dropout_score(stack)

    return _map_records(score, records, threads)


def preselect(catalog, fraction=DEFAULT_FRACTION, threads=None, created_at=None):
    """Keep the top ``ceil(fraction * N)`` tiles by mean segmentation intensity.

    Parameters
    ----------
    catalog : sequence of TileRecord
    fraction : float in (0, 1], default=0.05
    threads : int, optional
        Worker threads used to read tile artifacts. Output does not depend
        on it.

    Returns
    -------
    SelectionManifest
        Strategy ``"preselect"``; scores are the mean intensities.
    """
    records = list(catalog)
    if not records:
        raise PreconditionError("cannot pre-select from an empty catalog")
    check_fraction(fraction)
    intensities = catalog_intensities(records, threads)
    return preselect_scores(
        [r.tile_id for r in records], intensities, fraction, created_at=created_at
    )


class MCDropoutScorer(TransformerMixin, BaseEstimator):
    """Transform a batch of score stacks (N, T, H, W) into N uncertainty scores."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X)
        check_ndim(X, 4, "X")
        return np.array([mc_dropout_score(s) for s in X])
