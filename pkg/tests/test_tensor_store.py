import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tileselect.exceptions import (
    BadMagicError,
    CatalogError,
    DuplicateTileError,
    TruncatedTensorError,
    UnsupportedFormatError,
)
from tileselect.tensor_store import (
    SelectionManifest,
    TileRecord,
    load_catalog,
    load_embeddings,
    load_manifest,
    load_scores,
    read_tensor,
    save_catalog,
    save_embeddings,
    save_manifest,
    save_scores,
    write_tensor,
)


def test_zero_tensor_layout(tmp_path):
    path = tmp_path / "z.alts"
    write_tensor(path, [2, 2], [0, 0, 0, 0])
    raw = path.read_bytes()
    assert raw[:4] == b"ALTS"
    assert raw[4:7] == bytes([1, 1, 2])
    assert struct.unpack("<2I", raw[7:15]) == (2, 2)
    assert raw[15:] == bytes(16)


def test_one_is_ieee754_little_endian(tmp_path):
    path = tmp_path / "one.alts"
    write_tensor(path, [1], [1.0])
    assert path.read_bytes()[-4:] == bytes([0x00, 0x00, 0x80, 0x3F])


def test_small_roundtrip(tmp_path):
    path = tmp_path / "t.alts"
    write_tensor(path, [3], [1, 2, 3])
    dims, data = read_tensor(path)
    assert dims == (3,)
    assert data.tolist() == [1.0, 2.0, 3.0]


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(
        dtype=np.float32,
        shape=hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
        elements=st.floats(width=32, allow_nan=True, allow_infinity=True),
    )
)
def test_roundtrip_is_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("rt") / "a.alts"
    write_tensor(path, arr.shape, arr)
    dims, data = read_tensor(path)
    assert dims == arr.shape
    assert np.array_equal(data.view(np.uint32), arr.view(np.uint32))


def test_nan_payload_bits_survive(tmp_path):
    bits = np.array([0x7FC00001, 0xFFC12345, 0x7F800000, 0xFF800000], dtype=np.uint32)
    path = tmp_path / "nan.alts"
    write_tensor(path, [4], bits.view(np.float32))
    _, data = read_tensor(path)
    assert data.view(np.uint32).tolist() == bits.tolist()


def test_length_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "x.alts", [2, 3], [1.0] * 5)


def test_rank_limits(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        write_tensor(tmp_path / "x.alts", [1, 1, 1, 1], [0.0])


@pytest.mark.parametrize(
    "mutate, error",
    [
        (lambda b: b"XXXX" + b[4:], BadMagicError),
        (lambda b: b[:4] + bytes([2]) + b[5:], UnsupportedFormatError),
        (lambda b: b[:5] + bytes([7]) + b[6:], UnsupportedFormatError),
        (lambda b: b[:-3], TruncatedTensorError),
        (lambda b: b[:9], TruncatedTensorError),
        (lambda b: b + b"\0", UnsupportedFormatError),
    ],
    ids=["magic", "version", "dtype", "payload", "dims", "trailing"],
)
def test_read_errors_are_distinct(tmp_path, mutate, error):
    good = tmp_path / "good.alts"
    write_tensor(good, [2, 2], [1, 2, 3, 4])
    bad = tmp_path / "bad.alts"
    bad.write_bytes(mutate(good.read_bytes()))
    with pytest.raises(error):
        read_tensor(bad)


def _record(tid, **kw):
    return TileRecord(tid, "img", f"{tid}.stack", f"{tid}.feat", **kw)


def test_empty_catalog(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("")
    assert load_catalog(path) == []


def test_catalog_preserves_order(tmp_path):
    path = tmp_path / "c.jsonl"
    recs = [_record("b"), _record("a", mean_map_path="a.mean"), _record("c")]
    save_catalog(recs, path)
    assert [r.tile_id for r in load_catalog(path)] == ["b", "a", "c"]


def test_catalog_roundtrip_identity(tmp_path):
    path = tmp_path / "c.jsonl"
    recs = [_record("t1", ground_truth_path="gt1"), _record("t2")]
    save_catalog(recs, path)
    assert load_catalog(path, resolve_paths=False) == recs
    resolved = load_catalog(path)
    again = tmp_path / "again.jsonl"
    save_catalog(resolved, again)
    assert load_catalog(again) == resolved


def test_catalog_resolves_relative_paths(tmp_path):
    path = tmp_path / "c.jsonl"
    save_catalog([_record("t1")], path)
    rec = load_catalog(path)[0]
    assert rec.score_stack_path == str(tmp_path.resolve() / "t1.stack")


def test_duplicate_tile_id_named(tmp_path):
    path = tmp_path / "c.jsonl"
    line = json.dumps(_record("t1").to_json())
    path.write_text(line + "\n" + line + "\n")
    with pytest.raises(DuplicateTileError, match="t1"):
        load_catalog(path)


def test_malformed_line_reports_number(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(_record("t1").to_json()) + "\n{oops\n")
    with pytest.raises(CatalogError, match="line 2"):
        load_catalog(path)


def test_missing_field(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"tile_id": "a"}) + "\n")
    with pytest.raises(CatalogError, match="missing"):
        load_catalog(path)


@pytest.mark.parametrize("budget", [2, 1000, 5000])
def test_manifest_roundtrip(tmp_path, budget):
    ids = [f"t{i:05d}" for i in range(budget)]
    m = SelectionManifest("hybrid_clustering", budget, 2**64 - 1,
                          [(t, i / 7 if i % 3 else None) for i, t in enumerate(ids)])
    path = tmp_path / "m.json"
    save_manifest(m, path)
    again = load_manifest(path)
    assert again == m
    assert again.tile_ids == ids


def test_manifest_invariants():
    with pytest.raises(ValueError):
        SelectionManifest("random", 2, 0, [("a", None)])
    with pytest.raises(ValueError):
        SelectionManifest("random", 2, 0, [("a", None), ("a", None)])
    with pytest.raises(ValueError):
        SelectionManifest("nope", 1, 0, [("a", None)])
    # pre-selection manifests carry their own size
    SelectionManifest("preselect", 3, 0, [("a", 0.5), ("b", 0.1), ("c", 0.0)])


def test_malformed_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(ValueError):
        load_manifest(path)


def test_embeddings_sidecar(tmp_path):
    X = np.arange(6, dtype=np.float32).reshape(3, 2)
    save_embeddings(tmp_path / "e.alts", ["x", "y", "z"], X)
    ids, Y = load_embeddings(tmp_path / "e.alts")
    assert ids == ["x", "y", "z"]
    assert np.array_equal(X, Y)


def test_scores_roundtrip(tmp_path):
    save_scores(tmp_path / "s.jsonl", ["a", "b"], [0.25, 1e-12])
    assert load_scores(tmp_path / "s.jsonl") == {"a": 0.25, "b": 1e-12}
