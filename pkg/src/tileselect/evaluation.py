"""Detection-by-segmentation evaluation.

Probability maps are thresholded, split into connected components, and each
component is matched against ground-truth instances by area coverage: an
instance is detected when a single component covers at least half of it.
Coverage is exact on the pixel raster; no polygon geometry is involved.
"""

import dataclasses
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ._validation import check_ndim, check_unit_interval
from .exceptions import PreconditionError

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclasses.dataclass(frozen=True)
class Region:
    """A pixel set on a 2-D grid, stored as sorted flat (row-major) indices."""

    region_id: int
    pixels: np.ndarray
    shape: Tuple[int, int]

    @property
    def area(self):
        return int(self.pixels.size)

    @property
    def coords(self):
        return np.stack(np.unravel_index(self.pixels, self.shape), axis=1)

    def mask(self):
        out = np.zeros(self.shape, dtype=bool)
        out.flat[self.pixels] = True
        return out

    @classmethod
    def from_mask(cls, region_id, mask):
        mask = np.asarray(mask, dtype=bool)
        return cls(region_id, np.flatnonzero(mask), mask.shape)


# the two domain roles share one representation
PredictedComponent = Region
GroundTruthInstance = Region


@dataclasses.dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    n_components: int


@dataclasses.dataclass
class PRCurve:
    points: List[PRPoint]

    @property
    def thresholds(self):
        return [p.threshold for p in self.points]

    @property
    def precision(self):
        return [p.precision for p in self.points]

    @property
    def recall(self):
        return [p.recall for p in self.points]

    def to_json(self):
        return [dataclasses.asdict(p) for p in self.points]

    def to_csv(self):
        cols = [f.name for f in dataclasses.fields(PRPoint)]
        lines = [",".join(cols)]
        for p in self.points:
            lines.append(",".join(repr(getattr(p, c)) for c in cols))
        return "\n".join(lines) + "\n"


def threshold_map(prob_map, t):
    """Binary mask of pixels whose probability is at least ``t``."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise PreconditionError(f"threshold must be in [0, 1], got {t}")
    prob_map = check_unit_interval(prob_map, "probability map")
    return prob_map >= t


def connected_components(mask, connectivity=8) -> List[Region]:
    """Maximal connected pixel sets, ordered by their first pixel in raster order."""
    if connectivity not in _STRUCTURES:
        raise PreconditionError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask)
    check_ndim(mask, 2, "mask")
    labels, n = ndimage.label(mask.astype(bool), structure=_STRUCTURES[connectivity])
    return _regions_from_labels(labels, n)


def _regions_from_labels(labels, n=None):
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    if idx.size == 0:
        return []
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    lab_sorted = lab[order]
    cuts = np.flatnonzero(np.diff(lab_sorted)) + 1
    groups = np.split(idx[order], cuts)
    groups.sort(key=lambda g: g[0])
    return [Region(i, g, labels.shape) for i, g in enumerate(groups)]


def instances_from_label_map(label_map) -> List[Region]:
    """Ground-truth instances from an integer map (0 = background)."""
    label_map = np.asarray(label_map)
    check_ndim(label_map, 2, "label map")
    if not np.all(np.isfinite(label_map)):
        raise PreconditionError("label map contains non-finite values")
    as_int = label_map.astype(np.int64)
    if np.any(as_int != label_map) or np.any(as_int < 0):
        raise PreconditionError("label map must hold non-negative integers")
    flat = as_int.ravel()
    out = []
    for inst in np.unique(flat[flat > 0]):
        out.append(Region(int(inst), np.flatnonzero(flat == inst), as_int.shape))
    return out


def match_detections(components: Sequence[Region], gt_instances: Sequence[Region]):
    """Count (tp, fp, fn) under the half-area coverage rule.

    A ground-truth instance is a true positive when one component covers at
    least 50% of its pixels. A component that reaches 50% coverage of no
    instance is a false positive. One component may validate several
    instances; ``tp`` counts instances.
    """
    shapes = {r.shape for r in components} | {g.shape for g in gt_instances}
    if len(shapes) > 1:
        raise PreconditionError(f"regions lie on different grids: {sorted(shapes)}")
    if not gt_instances:
        return 0, len(components), 0
    shape = shapes.pop()
    gt_index = np.zeros(int(np.prod(shape)), dtype=np.int64)
    areas = np.zeros(len(gt_instances) + 1, dtype=np.int64)
    for i, g in enumerate(gt_instances, start=1):
        if np.any(gt_index[g.pixels]):
            raise PreconditionError("ground-truth instances overlap")
        gt_index[g.pixels] = i
        areas[i] = g.area
    detected = np.zeros(len(gt_instances) + 1, dtype=bool)
    fp = 0
    for comp in components:
        inter = np.bincount(gt_index[comp.pixels], minlength=len(areas))
        hits = 2 * inter >= areas
        hits[0] = False
        if hits.any():
            detected |= hits
        else:
            fp += 1
    tp = int(detected.sum())
    return tp, fp, len(gt_instances) - tp


def evaluate_map(prob_map, gt_instances, t, connectivity=8):
    comps = connected_components(threshold_map(prob_map, t), connectivity)
    tp, fp, fn = match_detections(comps, gt_instances)
    return tp, fp, fn, len(comps)


def pr_curve(prob_maps, gt_sets, thresholds=DEFAULT_THRESHOLDS, connectivity=8) -> PRCurve:
    """Aggregate precision/recall over all images at each threshold.

    Parameters
    ----------
    prob_maps : sequence of (H, W) arrays in [0, 1]
    gt_sets : sequence of ground-truth instance lists or integer label maps,
        aligned with ``prob_maps``
    thresholds : strictly increasing sequence in [0, 1]

    Notes
    -----
    Precision is ``(components - fp) / components`` (1.0 when there are no
    components); recall is ``tp / (tp + fn)`` (1.0 when there is no ground
    truth).
    """
    prob_maps = list(prob_maps)
    gt_sets = list(gt_sets)
    if len(prob_maps) != len(gt_sets):
        raise PreconditionError("probability maps and ground truth are misaligned")
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise PreconditionError("threshold grid is empty")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise PreconditionError("thresholds must be strictly increasing")
    gts = []
    for pm, gt in zip(prob_maps, gt_sets):
        if isinstance(gt, np.ndarray):
            gt = instances_from_label_map(gt)
        for g in gt:
            if g.shape != np.shape(pm):
                raise PreconditionError("ground truth grid differs from its map")
        gts.append(gt)

    points = []
    for t in thresholds:
        tp = fp = fn = m = 0
        for pm, gt in zip(prob_maps, gts):
            a, b, c, d = evaluate_map(pm, gt, t, connectivity)
            tp, fp, fn, m = tp + a, fp + b, fn + c, m + d
        precision = (m - fp) / m if m else 1.0
        recall = tp / (tp + fn) if tp + fn else 1.0
        points.append(PRPoint(t, precision, recall, tp, fp, fn, m))
    return PRCurve(points)
