import dataclasses
import json

import numpy as np
import pytest

from tileselect.exceptions import PreconditionError
from tileselect.simulator import (
    LOOP_STRATEGIES,
    SCENARIOS,
    PrototypeClassifier,
    SyntheticPoolConfig,
    compare_strategies,
    dumps_report,
    generate_pool,
    initial_labeled_ids,
    prototype_learner_eval,
    prototype_learner_fit,
    run_loop,
    synth_score_stack,
    uncertainty_sigma,
)
from tileselect.tensor_store import load_catalog, read_tensor
from tileselect.uncertainty import mc_dropout_score

SMALL = SyntheticPoolConfig(n_tiles=200, n_classes=4, feature_dim=6, height=16, width=16,
                            n_test=80, seed=3)


@pytest.fixture(scope="module")
def pool():
    return generate_pool(SMALL)


def test_noise_free_embedding_is_planted_vector():
    p = generate_pool(dataclasses.replace(SMALL, n_tiles=30, noise_scale=0.0))
    assert np.array_equal(p.embeddings, p.planted)


def test_same_seed_is_bit_identical(pool):
    again = generate_pool(SMALL)
    assert again.tile_ids == pool.tile_ids
    for name in ("embeddings", "scores", "intensities", "test_embeddings"):
        assert np.array_equal(getattr(again, name), getattr(pool, name))
    for i in (0, 57):
        for a, b in zip(again.tile_artifacts(i), pool.tile_artifacts(i)):
            assert (a is None and b is None) or np.array_equal(a, b)


def test_other_seed_differs(pool):
    other = generate_pool(dataclasses.replace(SMALL, seed=4))
    assert not np.array_equal(other.embeddings, pool.embeddings)


def test_variance_grows_with_distance():
    cfg = SyntheticPoolConfig()
    rng = np.random.default_rng(0)
    base = np.full((8, 8), 0.3)
    near = np.mean([mc_dropout_score(synth_score_stack(base, uncertainty_sigma(0.0, cfg), 10, rng))
                    for _ in range(100)])
    far = np.mean([mc_dropout_score(synth_score_stack(base, uncertainty_sigma(5 * cfg.within_std, cfg), 10, rng))
                   for _ in range(100)])
    assert far > near


def test_pool_scores_correlate_with_distance(pool):
    assert np.corrcoef(pool.distances, pool.scores)[0, 1] > 0.5


def test_artifacts_are_consistent(pool):
    i = int(np.flatnonzero(pool.positive)[0])
    fmap, stack, mean_map, gt = pool.tile_artifacts(i)
    assert fmap.shape == (16, 16, 6)
    assert stack.shape == (SMALL.n_samples, 16, 16)
    assert stack.min() >= 0 and stack.max() <= 1
    assert gt is not None and gt.max() >= 1
    assert float(mean_map[gt > 0].min()) > float(mean_map[gt == 0].max())
    j = int(np.flatnonzero(~pool.positive)[0])
    assert pool.tile_artifacts(j)[3] is None


def test_write_round_trip(tmp_path):
    p = generate_pool(dataclasses.replace(SMALL, n_tiles=12))
    records = load_catalog(p.write(tmp_path))
    assert [r.tile_id for r in records] == p.tile_ids
    _, stack = read_tensor(records[3].score_stack_path)
    assert mc_dropout_score(stack) == p.scores[3]


def test_learner_two_points():
    model = prototype_learner_fit(np.array([[0.0, 0.0], [10.0, 10.0]]), [0, 1])
    assert model.predict(np.array([[1.0, 1.0], [9.0, 8.0]])).tolist() == [0, 1]
    assert prototype_learner_eval(model, np.array([[1.0, 1.0]]), [1]) == 0.0


def test_learner_single_class_and_duplicate_centroids():
    model = PrototypeClassifier().fit(np.ones((3, 2)), [2, 2, 2])
    assert model.predict(np.zeros((2, 2))).tolist() == [2, 2]
    # identical centroids: tie goes to the smallest label
    tie = PrototypeClassifier().fit(np.zeros((2, 2)), [5, 1])
    assert tie.predict(np.ones((1, 2))).tolist() == [1]
    with pytest.raises(PreconditionError):
        PrototypeClassifier().fit(np.zeros((0, 2)), [])


def test_shuffled_labels_give_chance(pool):
    rng = np.random.default_rng(0)
    y = rng.integers(0, SMALL.n_classes, size=len(pool))
    model = prototype_learner_fit(pool.embeddings, y)
    acc = prototype_learner_eval(model, pool.test_embeddings, pool.test_labels)
    assert abs(acc - 1 / SMALL.n_classes) < 0.1


def test_true_labels_beat_chance(pool):
    model = prototype_learner_fit(pool.embeddings, pool._labels)
    assert prototype_learner_eval(model, pool.test_embeddings, pool.test_labels) > 0.6


def test_unlimited_reveals_everything(pool):
    rep = run_loop(pool, "unlimited", rounds=3, budget_per_round=5, seed=1)
    assert len(rep.rounds) == 2
    assert sorted(rep.revealed) == sorted(pool.tile_ids)


def test_budget_equal_to_pool_matches_unlimited(pool):
    n0 = len(initial_labeled_ids(pool, SCENARIOS["weak"], 1))
    rest = len(pool) - n0
    full = run_loop(pool, "random", rounds=1, budget_per_round=rest, seed=1)
    unl = run_loop(pool, "unlimited", rounds=1, budget_per_round=1, seed=1)
    assert full.final_accuracy == unl.final_accuracy
    with pytest.raises(PreconditionError, match="exhausted"):
        run_loop(pool, "random", rounds=1, budget_per_round=rest + 1, seed=1)


@pytest.mark.parametrize("scenario", sorted(SCENARIOS))
def test_scenarios_run(pool, scenario):
    rep = run_loop(pool, "hybrid_clustering", 2, 5, seed=0, initial_fraction=SCENARIOS[scenario])
    n0 = len(initial_labeled_ids(pool, SCENARIOS[scenario], 0))
    assert [r.labeled for r in rep.rounds] == [n0, n0 + 5, n0 + 10]


@pytest.mark.parametrize("strategy", [s for s in LOOP_STRATEGIES if s != "unlimited"])
def test_no_label_leakage(pool, strategy):
    rounds, b = 3, 4
    rep = run_loop(pool, strategy, rounds, b, seed=2)
    init = initial_labeled_ids(pool, SCENARIOS["weak"], 2)
    selected = [t for r in rep.rounds for t in r.selected_ids]
    assert rep.revealed == list(init) + selected
    assert len(set(rep.revealed)) == len(rep.revealed)
    assert rep.rounds[-1].labeled == len(init) + rounds * b
    assert [r.budget_spent for r in rep.rounds] == [0, 4, 8, 12]


def test_identical_strategies_give_identical_rows():
    cfg = dataclasses.replace(SMALL, n_tiles=100)
    report = compare_strategies(cfg, ["random", "random"], 2, 3, [0, 1])
    a, b = report.rows()
    assert a["final_accuracies"] == b["final_accuracies"]


def test_report_shape_and_bytes():
    cfg = dataclasses.replace(SMALL, n_tiles=100)
    args = (cfg, ["mc_dropout", "hybrid_clustering", "random"], 2, 3, [5, 6])
    report = compare_strategies(*args)
    rows = report.rows()
    assert [r["strategy"] for r in rows] == ["mc_dropout", "hybrid_clustering", "random"]
    assert all(r["n_seeds"] == 2 and 0 <= r["mean"] <= 1 and r["std"] >= 0 for r in rows)
    assert len(report.curves_csv().splitlines()) == 1 + 3 * 2 * 3
    assert dumps_report(report.to_json()) == dumps_report(compare_strategies(*args).to_json())
    json.loads(dumps_report(report.to_json()))
    with pytest.raises(PreconditionError):
        compare_strategies(cfg, ["random"], 1, 1, [0, 1])


def test_config_validation():
    with pytest.raises(PreconditionError):
        SyntheticPoolConfig(height=10)
    with pytest.raises(PreconditionError):
        SyntheticPoolConfig(n_classes=2, class_weights=[0.5, 0.6])
    cfg = SyntheticPoolConfig(n_classes=3)
    assert SyntheticPoolConfig.from_json(cfg.to_json()) == cfg
    assert cfg.class_weights[0] > cfg.class_weights[-1]
