"""Desk-scale active-learning loop on synthetic tiles.

Each synthetic tile belongs to one of several archetypes (a Gaussian mixture
in feature space). Its artifacts mimic what an upstream segmentation model
would emit: a decoder feature map whose pooled embedding is the planted
feature vector, a deterministic probability map with planted objects, and
a stack of stochastic maps whose spread grows with the tile's distance to
its nearest archetype centre. Labels stay hidden behind a
:class:`LabelOracle` that records every reveal.

A nearest-centroid learner stands in for retraining the segmentation model;
its accuracy on a class-balanced held-out split is the loop's metric.
"""

import dataclasses
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit, logit
from sklearn.base import BaseEstimator, ClassifierMixin

from .embedding import embed_tile
from .exceptions import PreconditionError
from .selection import PoolState, random_select, select
from .tensor_store import TileRecord, save_catalog, write_tensor
from .uncertainty import (
    DEFAULT_FRACTION,
    mc_dropout_score,
    mean_intensity,
    preselect_count,
    rank_by_intensity,
)

LOOP_STRATEGIES = (
    "mc_dropout",
    "coreset",
    "robust_coreset",
    "hybrid_naive",
    "hybrid_clustering",
    "random",
    "unlimited",
)
SCENARIOS = {"weak": 0.02, "strong": 0.30}


@dataclasses.dataclass
class SyntheticPoolConfig:
    n_tiles: int = 2000
    n_classes: int = 10
    feature_dim: int = 16
    height: int = 32
    width: int = 32
    n_samples: int = 10
    noise_scale: float = 0.05
    # None -> geometric long tail, see long_tail_weights
    class_weights: Optional[List[float]] = None
    seed: int = 0
    center_spread: float = 2.0
    within_std: float = 1.0
    positive_fraction: float = 0.5
    min_sigma: float = 0.1
    sigma_per_std: float = 0.25
    grid_size: int = 8
    n_test: int = 500

    def __post_init__(self):
        ints = ("n_tiles", "n_classes", "feature_dim", "height", "width",
                "n_samples", "grid_size", "n_test")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise PreconditionError(f"{name} must be positive")
        if self.n_samples < 2:
            raise PreconditionError("n_samples must be >= 2 for variance scoring")
        if self.noise_scale < 0 or self.within_std <= 0 or self.center_spread <= 0:
            raise PreconditionError("scales must be positive (noise may be 0)")
        if not 0 <= self.positive_fraction <= 1:
            raise PreconditionError("positive_fraction must be in [0, 1]")
        if self.height % self.grid_size or self.width % self.grid_size:
            raise PreconditionError("map size must be divisible by grid_size")
        if self.class_weights is None:
            self.class_weights = long_tail_weights(self.n_classes)
        w = np.asarray(self.class_weights, dtype=float)
        if len(w) != self.n_classes or np.any(w <= 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise PreconditionError("class_weights must be n_classes positive values summing to 1")
        self.class_weights = [float(x) for x in w]

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)

    def to_json(self):
        return dataclasses.asdict(self)


def long_tail_weights(n_classes, ratio=0.6):
    """Geometric class weights, most frequent first."""
    w = ratio ** np.arange(n_classes)
    return list(w / w.sum())


def uncertainty_sigma(distance, config):
    """Logit-space dropout noise for a tile ``distance`` away from its centre."""
    return config.min_sigma + config.sigma_per_std * distance / config.within_std


def synth_score_stack(base_map, sigma, n_samples, rng):
    """Stochastic maps ``sigmoid(logit(base) + sigma * z)``, one per sample."""
    z = rng.standard_normal((n_samples,) + base_map.shape)
    return expit(logit(base_map)[None] + sigma * z).astype(np.float32)


def _planted_objects(rng, h, w):
    """Probability map plus instance labels for a few rectangular objects."""
    base = np.full((h, w), rng.uniform(0.01, 0.05))
    labels = np.zeros((h, w), dtype=np.int64)
    n_obj = int(rng.integers(1, 4))
    for inst in range(1, n_obj + 1):
        oh, ow = (int(v) for v in rng.integers(2, max(3, h // 3), size=2))
        r0, c0 = int(rng.integers(0, h - oh + 1)), int(rng.integers(0, w - ow + 1))
        region = labels[r0:r0 + oh, c0:c0 + ow]
        free = region == 0
        region[free] = inst
        base[r0:r0 + oh, c0:c0 + ow][free] = rng.uniform(0.6, 0.95)
    # relabel away instances fully hidden by later ones
    present = np.unique(labels[labels > 0])
    relabel = np.zeros(n_obj + 1, dtype=np.int64)
    relabel[present] = np.arange(1, len(present) + 1)
    return base, relabel[labels]


class SyntheticPool:
    """A generated pool plus the hidden labels and a held-out test split.

    Attributes
    ----------
    tile_ids : list of str
    embeddings : ndarray (n_tiles, feature_dim)
        ``embed_tile`` applied to each tile's feature map.
    scores : ndarray (n_tiles,)
        MC-dropout score of each tile's stochastic stack.
    intensities : ndarray (n_tiles,)
        Mean intensity of each tile's deterministic probability map.
    """

    def __init__(self, config: SyntheticPoolConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0]))
        self.centers = rng.normal(0.0, c.center_spread, size=(c.n_classes, c.feature_dim))
        self._labels = rng.choice(c.n_classes, size=c.n_tiles, p=c.class_weights)
        self.planted = (
            self.centers[self._labels]
            + c.within_std * rng.standard_normal((c.n_tiles, c.feature_dim))
        ).astype(np.float32)
        self.positive = rng.random(c.n_tiles) < c.positive_fraction
        self.distances = np.linalg.norm(
            self.planted[:, None, :].astype(np.float64) - self.centers[None], axis=2
        ).min(axis=1)
        width = len(str(c.n_tiles - 1))
        self.tile_ids = [f"tile-{i:0{width}d}" for i in range(c.n_tiles)]

        n = c.n_tiles
        self.embeddings = np.empty((n, c.feature_dim), dtype=np.float32)
        self.scores = np.empty(n)
        self.intensities = np.empty(n)
        for i in range(n):
            fmap, stack, mean_map, _ = self.tile_artifacts(i)
            self.embeddings[i] = embed_tile(fmap, c.grid_size)
            self.scores[i] = mc_dropout_score(stack)
            self.intensities[i] = mean_intensity(mean_map)

        test_rng = np.random.default_rng(np.random.SeedSequence([c.seed, 1]))
        self.test_labels = np.arange(c.n_test) % c.n_classes
        planted_test = (
            self.centers[self.test_labels]
            + c.within_std * test_rng.standard_normal((c.n_test, c.feature_dim))
        ).astype(np.float32)
        self.test_embeddings = np.stack([
            embed_tile(self._feature_map(planted_test[j], test_rng), c.grid_size)
            for j in range(c.n_test)
        ])

    def __len__(self):
        return self.config.n_tiles

    def _feature_map(self, vector, rng):
        c = self.config
        fmap = np.broadcast_to(vector, (c.height, c.width, c.feature_dim))
        if c.noise_scale == 0:
            return np.array(fmap, dtype=np.float32)
        noise = rng.standard_normal((c.height, c.width, c.feature_dim))
        return (fmap + c.noise_scale * noise).astype(np.float32)

    def tile_artifacts(self, i):
        """(feature map, score stack, mean map, instance label map or None)."""
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence([c.seed, 2, i]))
        fmap = self._feature_map(self.planted[i], rng)
        if self.positive[i]:
            base, gt = _planted_objects(rng, c.height, c.width)
        else:
            base, gt = np.full((c.height, c.width), rng.uniform(0.01, 0.05)), None
        sigma = uncertainty_sigma(self.distances[i], c)
        stack = synth_score_stack(base, sigma, c.n_samples, rng)
        return fmap, stack, base.astype(np.float32), gt

    def oracle(self):
        return LabelOracle(dict(zip(self.tile_ids, self._labels.tolist())))

    def write(self, directory, catalog_name="catalog.jsonl"):
        """Write every tile's artifacts as tensor files plus a catalog."""
        directory = Path(directory)
        (directory / "tiles").mkdir(parents=True, exist_ok=True)
        records = []
        for i, tid in enumerate(self.tile_ids):
            fmap, stack, mean_map, gt = self.tile_artifacts(i)
            stem = f"tiles/{tid}"
            write_tensor(directory / f"{stem}.features.alts", fmap.shape, fmap)
            write_tensor(directory / f"{stem}.stack.alts", stack.shape, stack)
            write_tensor(directory / f"{stem}.mean.alts", mean_map.shape, mean_map)
            gt_path = None
            if gt is not None:
                gt_path = f"{stem}.gt.alts"
                write_tensor(directory / gt_path, gt.shape, gt.astype(np.float32))
            records.append(TileRecord(
                tid, f"image-{i // 16:04d}", f"{stem}.stack.alts",
                f"{stem}.features.alts", f"{stem}.mean.alts", gt_path,
            ))
        path = directory / catalog_name
        save_catalog(records, path)
        return path


def generate_pool(config: SyntheticPoolConfig) -> SyntheticPool:
    return SyntheticPool(config)


class LabelOracle:
    """Gatekeeper for hidden labels; counts every tile it reveals."""

    def __init__(self, labels: Dict[str, int]):
        self._labels = labels
        self.revealed = []

    def reveal(self, tile_ids):
        out = []
        for tid in tile_ids:
            self.revealed.append(tid)
            out.append(self._labels[tid])
        return np.array(out, dtype=np.int64)


class PrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-centroid classifier.

    Unlike :class:`sklearn.neighbors.NearestCentroid` it accepts a single
    observed class, and distance ties go to the smallest class label.
    """

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.shape[0] == 0:
            raise PreconditionError("cannot fit on an empty labelled set")
        self.classes_, inverse = np.unique(y, return_inverse=True)
        sums = np.zeros((len(self.classes_), X.shape[1]))
        np.add.at(sums, inverse, X)
        self.centroids_ = sums / np.bincount(inverse)[:, None]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        d = ((X[:, None, :] - self.centroids_[None]) ** 2).sum(axis=2)
        return self.classes_[np.argmin(d, axis=1)]


def prototype_learner_fit(X, y):
    return PrototypeClassifier().fit(X, y)


def prototype_learner_eval(model, X, y):
    return float(model.score(X, y))


@dataclasses.dataclass
class RoundRecord:
    round: int
    strategy: str
    budget_spent: int
    labeled: int
    accuracy: float
    selected_ids: List[str]


@dataclasses.dataclass
class LoopReport:
    strategy: str
    seed: int
    budget_per_round: int
    rounds: List[RoundRecord]
    revealed: List[str] = dataclasses.field(default_factory=list, repr=False)

    @property
    def final_accuracy(self):
        return self.rounds[-1].accuracy

    def to_json(self):
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "budget_per_round": self.budget_per_round,
            "final_accuracy": self.final_accuracy,
            "rounds": [dataclasses.asdict(r) for r in self.rounds],
        }


def _derived_seed(*parts):
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def initial_labeled_ids(pool, initial_fraction, seed):
    n0 = max(1, math.ceil(initial_fraction * len(pool) - 1e-9))
    m = random_select(PoolState(pool.tile_ids), n0, seed=_derived_seed(seed, 0))
    return m.tile_ids


def run_loop(
    pool: SyntheticPool,
    strategy,
    rounds,
    budget_per_round,
    seed=0,
    initial_fraction=SCENARIOS["weak"],
    fraction=DEFAULT_FRACTION,
    linkage="ward",
    outlier_budget=None,
) -> LoopReport:
    """Run pre-select / score / embed / select / label / refit rounds.

    The initial labelled set depends only on ``seed``, so strategies run with
    the same seed start from the same learner. Pre-selection keeps at least
    ``budget_per_round`` candidates. The ``unlimited`` strategy labels the
    whole remaining pool in a single round without pre-selection.
    """
    if strategy not in LOOP_STRATEGIES:
        raise PreconditionError(f"unknown strategy {strategy!r}")
    rounds, budget_per_round = int(rounds), int(budget_per_round)
    if rounds < 1 or budget_per_round < 1:
        raise PreconditionError("rounds and budget must be positive")
    oracle = pool.oracle()
    index = {t: i for i, t in enumerate(pool.tile_ids)}
    labeled = list(initial_labeled_ids(pool, initial_fraction, seed))
    y = list(oracle.reveal(labeled))
    taken = set(labeled)
    unlabeled = [t for t in pool.tile_ids if t not in taken]
    if strategy != "unlimited" and rounds * budget_per_round > len(unlabeled):
        raise PreconditionError(
            f"budget exhausted: {rounds} x {budget_per_round} exceeds "
            f"{len(unlabeled)} unlabelled tiles"
        )

    def fit_and_score():
        rows = [index[t] for t in labeled]
        model = prototype_learner_fit(pool.embeddings[rows], y)
        return prototype_learner_eval(model, pool.test_embeddings, pool.test_labels)

    records = [RoundRecord(0, strategy, 0, len(labeled), fit_and_score(), [])]
    for r in range(1, rounds + 1):
        if strategy == "unlimited":
            chosen = list(unlabeled)
        else:
            rows = np.array([index[t] for t in unlabeled])
            m = max(preselect_count(len(rows), fraction), budget_per_round)
            order = rank_by_intensity(unlabeled, pool.intensities[rows])[:m]
            cand = rows[order]
            state = PoolState(
                [pool.tile_ids[i] for i in cand],
                pool.embeddings[cand],
                pool.scores[cand],
            )
            manifest = select(
                state, strategy, budget_per_round,
                seed=_derived_seed(seed, r), linkage=linkage,
                outlier_budget=outlier_budget, created_at="",
            )
            chosen = manifest.tile_ids
        y.extend(oracle.reveal(chosen))
        labeled.extend(chosen)
        chosen_set = set(chosen)
        unlabeled = [t for t in unlabeled if t not in chosen_set]
        spent = len(chosen) if strategy == "unlimited" else r * budget_per_round
        records.append(RoundRecord(r, strategy, spent, len(labeled), fit_and_score(), list(chosen)))
        if strategy == "unlimited":
            break
    return LoopReport(strategy, int(seed), budget_per_round, records, list(oracle.revealed))


@dataclasses.dataclass
class ComparisonReport:
    strategies: List[str]
    seeds: List[int]
    reports: List[List[LoopReport]]

    def rows(self):
        out = []
        for name, runs in zip(self.strategies, self.reports):
            acc = np.array([r.final_accuracy for r in runs])
            out.append({
                "strategy": name,
                "mean": float(acc.mean()),
                "std": float(acc.std()),
                "n_seeds": len(acc),
                "final_accuracies": acc.tolist(),
            })
        return out

    def to_json(self):
        return {"seeds": list(self.seeds), "strategies": self.rows()}

    def to_table(self):
        lines = [f"{'strategy':<20} {'mean':>8} {'std':>8} {'seeds':>6}"]
        for row in self.rows():
            lines.append(
                f"{row['strategy']:<20} {row['mean']:8.4f} {row['std']:8.4f} {row['n_seeds']:6d}"
            )
        return "\n".join(lines) + "\n"

    def curves_csv(self):
        lines = ["strategy,seed,round,budget_spent,labeled,accuracy"]
        for name, runs in zip(self.strategies, self.reports):
            for rep in runs:
                for rec in rep.rounds:
                    lines.append(
                        f"{name},{rep.seed},{rec.round},{rec.budget_spent},"
                        f"{rec.labeled},{rec.accuracy!r}"
                    )
        return "\n".join(lines) + "\n"


def compare_strategies(
    config: SyntheticPoolConfig,
    strategies: Sequence[str],
    rounds,
    budget,
    seeds: Sequence[int],
    **loop_kwargs,
) -> ComparisonReport:
    """Final-accuracy mean and std per strategy across seeds.

    A fresh pool is generated per seed (the config's own seed is replaced),
    and every strategy sees the same pool and initial labelled set for a
    given seed.
    """
    strategies, seeds = list(strategies), [int(s) for s in seeds]
    if len(strategies) < 2 or len(seeds) < 2:
        raise PreconditionError("need at least 2 strategies and 2 seeds")
    reports = [[] for _ in strategies]
    for s in seeds:
        pool = generate_pool(dataclasses.replace(config, seed=s))
        for j, name in enumerate(strategies):
            reports[j].append(run_loop(pool, name, rounds, budget, seed=s, **loop_kwargs))
    return ComparisonReport(strategies, seeds, reports)


def dumps_report(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
