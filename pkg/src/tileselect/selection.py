"""Budget-constrained selection strategies over a candidate pool.

Every strategy returns a :class:`SelectionManifest` with exactly ``k``
distinct tile ids. Internally candidates are visited in ascending tile_id
order, so "first index wins" in an argmax/argmin is the tile_id tie rule.
"""

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from ._validation import check_budget, check_embeddings, check_finite
from .clustering import LINKAGES, agglomerative_cluster
from .exceptions import PreconditionError
from .tensor_store import SelectionManifest

DEFAULT_OUTLIER_FRACTION = 0.01
# radius bisection switches from materialised pairwise distances to a
# continuous interval above this many distance entries
_MAX_DISTANCE_ENTRIES = 1 << 24
_DEFAULT_NODE_LIMIT = 20000


@dataclasses.dataclass
class PoolState:
    """Candidates (after pre-selection) plus optional already-labelled anchors.

    ``embeddings`` and ``scores`` are row-aligned with ``tile_ids``. Either may
    be None for strategies that do not need it.
    """

    tile_ids: Sequence[str]
    embeddings: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    anchors: Optional[np.ndarray] = None
    anchor_ids: Sequence[str] = ()

    def __post_init__(self):
        self.tile_ids = [str(t) for t in self.tile_ids]
        n = len(self.tile_ids)
        if len(set(self.tile_ids)) != n:
            raise PreconditionError("duplicate tile ids in pool")
        if self.embeddings is not None:
            self.embeddings = check_embeddings(self.embeddings)
            if self.embeddings.shape[0] != n:
                raise PreconditionError("embeddings and tile ids are misaligned")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if self.scores.shape[0] != n:
                raise PreconditionError("scores and tile ids are misaligned")
            check_finite(self.scores, "uncertainty scores")
        if self.anchors is not None:
            self.anchors = check_embeddings(self.anchors, "anchors")
            if self.embeddings is not None and self.anchors.shape[0] and (
                self.anchors.shape[1] != self.embeddings.shape[1]
            ):
                raise PreconditionError("anchor and candidate dimensions differ")
        overlap = set(self.anchor_ids) & set(self.tile_ids)
        if overlap:
            raise PreconditionError(f"ids both anchor and candidate: {sorted(overlap)[:5]}")
        self._order = np.argsort(np.asarray(self.tile_ids, dtype=str), kind="stable")

    def __len__(self):
        return len(self.tile_ids)

    @property
    def has_anchors(self):
        return self.anchors is not None and self.anchors.shape[0] > 0

    def subset(self, rows):
        rows = np.asarray(rows, dtype=int)
        return PoolState(
            [self.tile_ids[i] for i in rows],
            None if self.embeddings is None else self.embeddings[rows],
            None if self.scores is None else self.scores[rows],
            self.anchors,
            self.anchor_ids,
        )

    def require_embeddings(self):
        if self.embeddings is None:
            raise PreconditionError("strategy needs embeddings")
        return self.embeddings

    def require_scores(self):
        if self.scores is None:
            raise PreconditionError("strategy needs uncertainty scores")
        return self.scores


def _manifest(strategy, pool, rows, scores, k, seed=0, created_at=None):
    selected = [(pool.tile_ids[i], s) for i, s in zip(rows, scores)]
    kwargs = {} if created_at is None else {"created_at": created_at}
    return SelectionManifest(strategy, k, seed, selected, **kwargs)


def _distances_to(X, point):
    return np.sqrt(((X - point) ** 2).sum(axis=1))


def _nearest_distance(X, centers):
    """Distance from each row of X to its nearest row of ``centers``."""
    out = np.full(X.shape[0], np.inf)
    for c in centers:
        np.minimum(out, _distances_to(X, c), out=out)
    return out


def cover_radius(pool: PoolState, selected_ids, n_outliers=0):
    """Max distance from a candidate to its nearest selected-or-anchor point.

    With ``n_outliers > 0`` the largest ``n_outliers`` distances are ignored.
    """
    X = pool.require_embeddings()
    index = {t: i for i, t in enumerate(pool.tile_ids)}
    centers = [X[index[t]] for t in selected_ids]
    if pool.has_anchors:
        centers.extend(pool.anchors)
    if not centers:
        return math.inf
    d = np.sort(_nearest_distance(X, centers))
    keep = len(d) - int(n_outliers)
    return float(d[keep - 1]) if keep > 0 else 0.0


# -- uncertainty -----------------------------------------------------------


def _top_k_rows(pool, k, rows=None):
    scores = pool.require_scores()
    rows = pool._order if rows is None else rows
    # stable sort on -score over id-ordered rows keeps the tile_id tie rule
    order = np.argsort(-scores[rows], kind="stable")
    return [int(rows[i]) for i in order[:k]]


def top_k_uncertain(pool: PoolState, k, created_at=None):
    """The ``k`` most uncertain tiles, highest score first."""
    k = check_budget(k, len(pool))
    rows = _top_k_rows(pool, k)
    return _manifest("mc_dropout", pool, rows, pool.scores[rows], k, created_at=created_at)


# -- k-center --------------------------------------------------------------


def _greedy_rows(X, order, k, min_dist=None, taken=()):
    """Farthest-first traversal over rows of X, visited in ``order``.

    ``min_dist`` holds distances to pre-existing centers (anchors); rows in
    ``taken`` are never picked. Returns (picked rows, distance at pick time,
    final min distances).
    """
    Xo = X[order]
    pos = np.empty(len(order), dtype=int)
    pos[order] = np.arange(len(order))
    blocked = np.zeros(len(order), dtype=bool)
    blocked[pos[list(taken)]] = True
    picked, pick_dist = [], []
    if min_dist is None:
        min_dist = np.full(len(order), np.inf)
    else:
        min_dist = min_dist[order].copy()
    while len(picked) < k:
        if np.isinf(min_dist).all():
            # no centers yet: smallest free tile_id
            j = int(np.argmin(blocked))
            pick_dist.append(None)
        else:
            j = int(np.argmax(np.where(blocked, -1.0, min_dist)))
            pick_dist.append(float(min_dist[j]))
        picked.append(int(order[j]))
        blocked[j] = True
        np.minimum(min_dist, _distances_to(Xo, Xo[j]), out=min_dist)
    final = np.empty_like(min_dist)
    final[order] = min_dist
    return picked, pick_dist, final


def _anchor_distances(pool):
    if not pool.has_anchors:
        return None
    return _nearest_distance(pool.embeddings, pool.anchors)


def kcenter_greedy(pool: PoolState, k, created_at=None):
    """Farthest-first k-center selection.

    Without anchors the first center is the smallest tile_id; each later
    center is the candidate farthest from everything chosen so far
    (anchors included). Scores are the distances at pick time.

    Returns
    -------
    manifest : SelectionManifest
    radius : float
        Final cover radius over the candidates.
    """
    X = pool.require_embeddings()
    k = check_budget(k, len(pool))
    rows, dist, final = _greedy_rows(X, pool._order, k, _anchor_distances(pool))
    manifest = _manifest("coreset", pool, rows, dist, k, created_at=created_at)
    return manifest, float(final.max())


def _covering_search(D, anchor_cover, r2, k, n_outliers, node_limit):
    """Open at most ``k`` centers of radius ``r2`` leaving <= n_outliers uncovered.

    Depth-first over the smallest uncovered row: either it opens a center or
    it is declared an outlier. If a robust solution of radius r2/2 exists,
    the branch agreeing with it succeeds, since every non-outlier pick
    covers its whole optimal cluster. Returns the centers, or None when
    infeasible or when ``node_limit`` is exhausted.
    """
    n = D.shape[0]
    budget = [node_limit]

    def recurse(uncovered, centers, outliers_left):
        budget[0] -= 1
        if budget[0] < 0:
            return None
        live = np.flatnonzero(uncovered)
        if len(live) <= outliers_left:
            return centers
        if len(centers) == k:
            return None
        p = int(live[0])
        covered = D[p] <= r2
        found = recurse(uncovered & ~covered, centers + [p], outliers_left)
        if found is not None or outliers_left == 0:
            return found
        rest = uncovered.copy()
        rest[p] = False
        return recurse(rest, centers, outliers_left - 1)

    start = np.ones(n, dtype=bool) if anchor_cover is None else anchor_cover > r2
    return recurse(start, [], n_outliers)


def robust_kcenter(
    pool: PoolState,
    k,
    outlier_budget=None,
    iterations=None,
    node_limit=_DEFAULT_NODE_LIMIT,
    created_at=None,
):
    """Robust k-center: cover all but ``outlier_budget`` candidates.

    Starts from :func:`kcenter_greedy`, then bisects over the realised
    pairwise distances for the smallest radius ``r`` at which at most ``k``
    balls of radius ``2r`` cover all but ``outlier_budget`` candidates.
    The centers found are padded to ``k`` by farthest-first traversal. The
    solution with the smaller outlier-excluded radius (greedy or search) is
    returned.

    Parameters
    ----------
    outlier_budget : int, optional
        Number of candidates allowed to stay uncovered; defaults to 1% of
        the pool, rounded down.
    iterations : int, optional
        Maximum bisection steps. Defaults to enough steps to resolve the
        full distance set.
    node_limit : int
        Cap on the covering search per radius. An exhausted search counts as
        infeasible, which can only make the result more conservative.
    """
    X = pool.require_embeddings()
    n = len(pool)
    k = check_budget(k, n)
    if outlier_budget is None:
        outlier_budget = int(DEFAULT_OUTLIER_FRACTION * n)
    outlier_budget = int(outlier_budget)
    if outlier_budget < 0:
        raise PreconditionError("outlier budget must be >= 0")

    greedy, _ = kcenter_greedy(pool, k)
    greedy_radius = cover_radius(pool, greedy.tile_ids, outlier_budget)

    D = cdist(X, X)
    anchor_cover = _anchor_distances(pool)
    entries = n * n + (n * pool.anchors.shape[0] if pool.has_anchors else 0)
    if entries <= _MAX_DISTANCE_ENTRIES:
        radii = D[np.triu_indices(n, 1)]
        if pool.has_anchors:
            radii = np.concatenate([radii, np.ravel(cdist(X, pool.anchors))])
        radii = np.unique(np.concatenate([[0.0], radii]))
        radii = radii[radii <= greedy_radius]
        if radii.size == 0:
            radii = np.array([0.0])
        steps = iterations if iterations is not None else int(np.ceil(np.log2(len(radii)))) + 1
        lo, hi = -1, len(radii)
        best = None
        for _ in range(max(1, steps)):
            if hi - lo <= 1:
                break
            mid = (lo + hi) // 2
            found = _covering_search(
                D, anchor_cover, 2 * radii[mid], k, outlier_budget, node_limit
            )
            if found is None:
                lo = mid
            else:
                hi, best = mid, found
    else:
        lo_r, hi_r = 0.0, greedy_radius / 2
        best = _covering_search(D, anchor_cover, 2 * hi_r, k, outlier_budget, node_limit)
        for _ in range(iterations if iterations is not None else 30):
            mid = (lo_r + hi_r) / 2
            found = _covering_search(D, anchor_cover, 2 * mid, k, outlier_budget, node_limit)
            if found is None:
                lo_r = mid
            else:
                hi_r, best = mid, found

    chosen = greedy.tile_ids
    if best is not None:
        centers = list(best)
        if len(centers) < k:
            existing = [X[c] for c in centers]
            if pool.has_anchors:
                existing.extend(pool.anchors)
            base = _nearest_distance(X, existing) if existing else None
            extra, _, _ = _greedy_rows(X, pool._order, k - len(centers), base, centers)
            centers += extra
        candidate = [pool.tile_ids[c] for c in centers]
        if cover_radius(pool, candidate, outlier_budget) <= greedy_radius:
            chosen = candidate
    return SelectionManifest(
        "robust_coreset",
        k,
        0,
        [(t, None) for t in chosen],
        **({} if created_at is None else {"created_at": created_at}),
    )


# -- hybrids ---------------------------------------------------------------


def hybrid_naive(pool: PoolState, k, created_at=None):
    """Core-set for ``ceil(k/2)`` tiles, then top uncertainty for the rest.

    Scores are pick-time distances for the core-set half and uncertainty
    scores for the second half.
    """
    X = pool.require_embeddings()
    pool.require_scores()
    k = check_budget(k, len(pool))
    n_core = math.ceil(k / 2)
    core_rows, core_dist, _ = _greedy_rows(X, pool._order, n_core, _anchor_distances(pool))
    taken = set(core_rows)
    remaining = np.array([r for r in pool._order if r not in taken], dtype=int)
    unc_rows = _top_k_rows(pool, k - n_core, remaining)
    rows = core_rows + unc_rows
    scores = core_dist + [float(pool.scores[r]) for r in unc_rows]
    return _manifest("hybrid_naive", pool, rows, scores, k, created_at=created_at)


def hybrid_clustering(pool: PoolState, k, linkage="ward", created_at=None):
    """Cluster into ``k`` groups and take the most uncertain tile of each.

    Output is ordered by cluster label.
    """
    X = pool.require_embeddings()
    scores = pool.require_scores()
    k = check_budget(k, len(pool))
    labels = agglomerative_cluster(X, k, linkage).labels
    ids = np.asarray(pool.tile_ids, dtype=str)
    # within each cluster: max score, then smallest id
    order = np.lexsort((ids, -scores, labels))
    first = np.ones(len(order), dtype=bool)
    first[1:] = labels[order][1:] != labels[order][:-1]
    rows = [int(r) for r in order[first]]
    return _manifest("hybrid_clustering", pool, rows, scores[rows], k, created_at=created_at)


# -- random ----------------------------------------------------------------


def random_select(pool: PoolState, k, seed=0, created_at=None):
    """Uniform sample without replacement.

    Uses a partial Fisher-Yates shuffle over the id-sorted candidates,
    driven by numpy's Philox counter-based generator keyed by ``seed``,
    so the result is independent of input row order and platform.
    """
    k = check_budget(k, len(pool))
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise PreconditionError("seed must be an unsigned 64-bit integer")
    rng = np.random.Generator(np.random.Philox(seed))
    perm = list(pool._order)
    n = len(perm)
    for i in range(k):
        j = i + int(rng.integers(0, n - i))
        perm[i], perm[j] = perm[j], perm[i]
    rows = perm[:k]
    return _manifest("random", pool, rows, [None] * k, k, seed=seed, created_at=created_at)


SELECTORS = {
    "mc_dropout": top_k_uncertain,
    "coreset": lambda pool, k, **kw: kcenter_greedy(pool, k, **kw)[0],
    "robust_coreset": robust_kcenter,
    "hybrid_naive": hybrid_naive,
    "hybrid_clustering": hybrid_clustering,
    "random": random_select,
}


def select(pool, strategy, k, seed=0, linkage="ward", outlier_budget=None, created_at=None):
    """Dispatch to a strategy by name."""
    kw = {"created_at": created_at}
    if strategy == "random":
        kw["seed"] = seed
    elif strategy == "hybrid_clustering":
        if linkage not in LINKAGES:
            raise PreconditionError(f"unknown linkage {linkage!r}")
        kw["linkage"] = linkage
    elif strategy == "robust_coreset":
        kw["outlier_budget"] = outlier_budget
    elif strategy not in SELECTORS:
        raise PreconditionError(f"unknown strategy {strategy!r}")
    return SELECTORS[strategy](pool, k, **kw)


class ActiveSelector(BaseEstimator):
    """Estimator front-end for the selection strategies.

    Parameters
    ----------
    strategy : str, default="hybrid_clustering"
        One of ``mc_dropout``, ``coreset``, ``robust_coreset``,
        ``hybrid_naive``, ``hybrid_clustering``, ``random``.
    budget : int, default=1000
    seed : int, default=0
    linkage : str, default="ward"
    outlier_budget : int, optional

    Attributes
    ----------
    manifest_ : SelectionManifest
    selected_indices_ : ndarray
        Row indices into ``X`` in selection order.
    """

    def __init__(self, strategy="hybrid_clustering", budget=1000, seed=0,
                 linkage="ward", outlier_budget=None):
        self.strategy = strategy
        self.budget = budget
        self.seed = seed
        self.linkage = linkage
        self.outlier_budget = outlier_budget

    def fit(self, X, y=None, *, scores=None, tile_ids=None, anchors=None):
        X = check_embeddings(X)
        if tile_ids is None:
            width = len(str(max(len(X) - 1, 0)))
            tile_ids = [f"{i:0{width}d}" for i in range(len(X))]
        pool = PoolState(tile_ids, X, scores, anchors)
        self.manifest_ = select(
            pool, self.strategy, self.budget, seed=self.seed,
            linkage=self.linkage, outlier_budget=self.outlier_budget,
        )
        index = {t: i for i, t in enumerate(pool.tile_ids)}
        self.selected_indices_ = np.array([index[t] for t in self.manifest_.tile_ids])
        self.n_features_in_ = X.shape[1]
        return self
