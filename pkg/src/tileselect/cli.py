"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 2 invalid flags, 3 I/O or file-format failure,
4 precondition violation. Errors are reported on stderr as one JSON object.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import LINKAGES, agglomerative_cluster
from .embedding import DEFAULT_GRID, embed_tile
from .evaluation import DEFAULT_THRESHOLDS, instances_from_label_map, pr_curve
from .exceptions import CatalogError, PreconditionError, TensorFormatError
from .selection import PoolState, select
from .simulator import (
    LOOP_STRATEGIES,
    SCENARIOS,
    ComparisonReport,
    SyntheticPoolConfig,
    dumps_report,
    generate_pool,
    run_loop,
)
from .tensor_store import (
    load_catalog,
    load_embeddings,
    load_manifest,
    load_scores,
    read_tensor,
    save_embeddings,
    save_manifest,
    save_scores,
    write_jsonl,
)
from .uncertainty import DEFAULT_FRACTION, catalog_scores, intensity_map_for, preselect

# fixed so that reruns produce byte-identical manifests
DEFAULT_CREATED_AT = "1970-01-01T00:00:00Z"
SELECT_STRATEGIES = (
    "mc_dropout",
    "coreset",
    "robust_coreset",
    "hybrid_naive",
    "hybrid_clustering",
    "random",
)
PRESETS = {"weak": 1000, "strong": 5000}


class UsageError(Exception):
    """Flag combination rejected after parsing (exit code 2)."""


def _csv_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_strategies(text):
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in LOOP_STRATEGIES]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown strategy {bad[0] if bad else text!r}; choose from {', '.join(LOOP_STRATEGIES)}"
        )
    return names


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _budget(text):
    if text in PRESETS:
        return PRESETS[text]
    return _positive_int(text)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="tileselect",
        description="Active-learning tile selection for detection by segmentation.",
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        return p

    def threads(p):
        p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                       help="worker threads for per-tile stages; output does not depend on it")

    def created_at(p):
        p.add_argument("--created-at", default=DEFAULT_CREATED_AT,
                       help="timestamp recorded in the manifest")

    def restrict(p):
        p.add_argument("--preselection", type=Path, default=None,
                       help="manifest restricting the catalog to its tile ids")

    p = add("preselect", "Keep the top fraction of tiles by mean segmentation intensity.")
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--out", type=Path, required=True, help="output manifest (JSON)")
    threads(p)
    created_at(p)

    p = add("score", "Compute MC-dropout uncertainty scores for every tile.")
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output scores (JSON lines)")
    restrict(p)
    threads(p)

    p = add("embed", "Pool decoder feature maps into embedding vectors.")
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--grid-size", type=_positive_int, default=DEFAULT_GRID)
    p.add_argument("--out", type=Path, required=True,
                   help="output tensor; ids go to OUT.ids.jsonl")
    restrict(p)
    threads(p)

    p = add("cluster", "Agglomerative clustering of embeddings into k groups.")
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--k", type=_positive_int, required=True)
    p.add_argument("--linkage", choices=LINKAGES, default="ward")
    p.add_argument("--out", type=Path, required=True, help="output labels (JSON lines)")

    p = add("select", "Select a labelling budget of tiles with one strategy.")
    p.add_argument("--strategy", choices=SELECT_STRATEGIES, required=True)
    p.add_argument("--budget", type=_budget, required=True,
                   help="number of tiles, or a preset: weak=1000, strong=5000")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--embeddings", type=Path, default=None)
    p.add_argument("--scores", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="output manifest (JSON)")
    p.add_argument("--linkage", choices=LINKAGES, default="ward")
    p.add_argument("--outliers", type=int, default=None,
                   help="robust k-center outlier budget (default: 1%% of candidates)")
    p.add_argument("--anchors", type=Path, default=None,
                   help="embeddings of already-labelled tiles (tensor + ids sidecar)")
    restrict(p)
    created_at(p)

    p = add("eval", "Precision-recall curve over a catalog with ground truth.")
    p.add_argument("--catalog", type=Path, required=True)
    p.add_argument("--thresholds", type=_csv_floats,
                   default=list(DEFAULT_THRESHOLDS),
                   help="comma-separated, strictly increasing")
    p.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    p.add_argument("--out", type=Path, required=True, help="output curve (JSON)")
    p.add_argument("--csv", type=Path, default=None, help="optional CSV copy of the curve")
    threads(p)

    p = add("simulate", "Run the synthetic active-learning loop and compare strategies.")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file with synthetic pool settings")
    p.add_argument("--strategies", type=_csv_strategies,
                   default=["random", "mc_dropout", "coreset", "hybrid_naive", "hybrid_clustering"])
    p.add_argument("--rounds", type=_positive_int, default=5)
    p.add_argument("--budget", type=_positive_int, default=50)
    p.add_argument("--seeds", type=_csv_ints, default=[0, 1])
    p.add_argument("--scenario", choices=sorted(SCENARIOS), default="weak",
                   help="initial labelled fraction: weak=2%%, strong=30%%")
    p.add_argument("--fraction", type=float, default=DEFAULT_FRACTION)
    p.add_argument("--linkage", choices=LINKAGES, default="ward")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = add("generate", "Write a synthetic tile pool (tensors + catalog) to disk.")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--n-tiles", type=_positive_int, default=None)
    p.add_argument("--seed", type=_seed, default=None)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


# -- helpers ---------------------------------------------------------------


def _pmap(fn, items, n_threads):
    if n_threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _catalog(args):
    records = load_catalog(args.catalog)
    if getattr(args, "preselection", None) is not None:
        keep = set(load_manifest(args.preselection).tile_ids)
        records = [r for r in records if r.tile_id in keep]
    return records


def _load_config(path, **overrides):
    obj = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    obj.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SyntheticPoolConfig.from_json(obj)
    except TypeError as exc:
        raise PreconditionError(f"bad config: {exc}") from exc


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


# -- subcommands -----------------------------------------------------------


def cmd_preselect(args):
    manifest = preselect(_catalog(args), args.fraction, args.threads, args.created_at)
    save_manifest(manifest, args.out)


def cmd_score(args):
    records = _catalog(args)
    scores = catalog_scores(records, args.threads)
    save_scores(args.out, [r.tile_id for r in records], scores)


def cmd_embed(args):
    records = _catalog(args)
    if not records:
        raise PreconditionError("catalog is empty")

    def one(rec):
        dims, fmap = read_tensor(rec.feature_map_path)
        return embed_tile(fmap, args.grid_size)

    rows = _pmap(one, records, args.threads)
    dims = {r.shape for r in rows}
    if len(dims) > 1:
        raise PreconditionError(f"feature maps disagree on channel count: {sorted(dims)}")
    save_embeddings(args.out, [r.tile_id for r in records], np.stack(rows))


def cmd_cluster(args):
    ids, X = load_embeddings(args.embeddings)
    labels = agglomerative_cluster(X, args.k, args.linkage).labels
    write_jsonl(args.out, ({"tile_id": t, "cluster": int(c)} for t, c in zip(ids, labels)))


def cmd_select(args):
    needs_emb = args.strategy in ("coreset", "robust_coreset", "hybrid_naive", "hybrid_clustering")
    needs_scores = args.strategy in ("mc_dropout", "hybrid_naive", "hybrid_clustering")
    if needs_emb and args.embeddings is None:
        raise UsageError(f"--embeddings is required for --strategy {args.strategy}")
    if needs_scores and args.scores is None:
        raise UsageError(f"--scores is required for --strategy {args.strategy}")
    if args.anchors is not None and not needs_emb:
        raise UsageError(f"--anchors has no effect with --strategy {args.strategy}")
    ids = [r.tile_id for r in _catalog(args)]
    if not ids:
        raise PreconditionError("no candidate tiles")

    embeddings = scores = anchors = None
    anchor_ids = ()
    if needs_emb:
        emb_ids, emb = load_embeddings(args.embeddings)
        row = {t: i for i, t in enumerate(emb_ids)}
        missing = [t for t in ids if t not in row]
        if missing:
            raise PreconditionError(f"no embedding for tile {missing[0]!r}")
        embeddings = emb[[row[t] for t in ids]]
        if args.anchors is not None:
            anchor_ids, anchors = load_embeddings(args.anchors)
    if needs_scores:
        table = load_scores(args.scores)
        missing = [t for t in ids if t not in table]
        if missing:
            raise PreconditionError(f"no score for tile {missing[0]!r}")
        scores = np.array([table[t] for t in ids])
    pool = PoolState(ids, embeddings, scores, anchors, anchor_ids)
    manifest = select(
        pool, args.strategy, args.budget, seed=args.seed, linkage=args.linkage,
        outlier_budget=args.outliers, created_at=args.created_at,
    )
    save_manifest(manifest, args.out)


def cmd_eval(args):
    records = _catalog(args)

    def load(rec):
        prob = intensity_map_for(rec)
        if rec.ground_truth_path:
            _, gt = read_tensor(rec.ground_truth_path)
            if gt.ndim == 3 and gt.shape[0] == 1:
                gt = gt[0]
            return prob, instances_from_label_map(gt)
        return prob, []

    loaded = _pmap(load, records, args.threads)
    curve = pr_curve([p for p, _ in loaded], [g for _, g in loaded],
                     args.thresholds, args.connectivity)
    _write_text(args.out, json.dumps(curve.to_json(), indent=2) + "\n")
    if args.csv is not None:
        _write_text(args.csv, curve.to_csv())


def cmd_simulate(args):
    config = _load_config(args.config)
    initial = SCENARIOS[args.scenario]
    reports = [[] for _ in args.strategies]
    for s in args.seeds:
        pool = generate_pool(SyntheticPoolConfig(**{**config.to_json(), "seed": s}))
        for j, name in enumerate(args.strategies):
            reports[j].append(run_loop(
                pool, name, args.rounds, args.budget, seed=s,
                initial_fraction=initial, fraction=args.fraction, linkage=args.linkage,
            ))
    comparison = ComparisonReport(args.strategies, args.seeds, reports)
    args.out.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": config.to_json(),
        "scenario": args.scenario,
        "rounds": args.rounds,
        "budget": args.budget,
        "summary": comparison.to_json(),
        "runs": [rep.to_json() for runs in reports for rep in runs],
    }
    _write_text(args.out / "report.json", dumps_report(payload))
    _write_text(args.out / "curves.csv", comparison.curves_csv())
    _write_text(args.out / "summary.txt", comparison.to_table())
    sys.stdout.write(comparison.to_table())


def cmd_generate(args):
    config = _load_config(args.config, n_tiles=args.n_tiles, seed=args.seed)
    generate_pool(config).write(args.out)


COMMANDS = {
    "preselect": cmd_preselect,
    "score": cmd_score,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "select": cmd_select,
    "eval": cmd_eval,
    "simulate": cmd_simulate,
    "generate": cmd_generate,
}


def _fail(kind, code, exc):
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return code


def run(argv=None):
    """Execute one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", 2, exc)
    except (OSError, TensorFormatError, CatalogError, json.JSONDecodeError) as exc:
        return _fail("io", 3, exc)
    except (PreconditionError, ValueError) as exc:
        return _fail("precondition", 4, exc)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
