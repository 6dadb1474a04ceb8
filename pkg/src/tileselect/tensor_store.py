"""Persistence for tensors, tile catalogs and selection manifests.

Tensor container layout (all integers little-endian)::

    offset  size        field
    0       4           magic "ALTS"
    4       1           version (1)
    5       1           dtype code (1 = float32)
    6       1           ndim (1..3)
    7       4 * ndim    dims, uint32
    ...     prod(dims)*4  row-major payload

Payload bytes are stored verbatim, so NaN/Inf bit patterns survive a
roundtrip. Rejecting non-finite values is left to the scoring code.
"""

import dataclasses
import datetime as _dt
import json
import math
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import (
    BadMagicError,
    CatalogError,
    DuplicateTileError,
    TruncatedTensorError,
    UnsupportedFormatError,
)

MAGIC = b"ALTS"
VERSION = 1
DTYPE_FLOAT32 = 1
_ELEMENT_SIZE = {DTYPE_FLOAT32: 4}
_HEADER = struct.Struct("<4sBBB")

STRATEGIES = (
    "preselect",
    "mc_dropout",
    "coreset",
    "robust_coreset",
    "hybrid_naive",
    "hybrid_clustering",
    "random",
)


# -- tensors ---------------------------------------------------------------


def encode_tensor(dims, data) -> bytes:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 3:
        raise UnsupportedFormatError(f"ndim must be 1, 2 or 3, got {len(dims)}")
    if any(d < 1 or d > 0xFFFFFFFF for d in dims):
        raise ValueError(f"dims must be in [1, 2**32), got {dims}")
    arr = np.asarray(data)
    if arr.dtype != np.dtype("<f4"):
        arr = arr.astype("<f4")
    if arr.size != math.prod(dims):
        raise ValueError(
            f"data has {arr.size} elements but dims {dims} need {math.prod(dims)}"
        )
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    return header + np.ascontiguousarray(arr).reshape(-1).tobytes()


def decode_tensor(buf: bytes) -> Tuple[Tuple[int, ...], np.ndarray]:
    if len(buf) < 4:
        raise TruncatedTensorError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedTensorError("truncated header")
    _, version, dtype, ndim = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedFormatError(f"unsupported version {version}")
    if dtype not in _ELEMENT_SIZE:
        raise UnsupportedFormatError(f"unsupported dtype code {dtype}")
    if not 1 <= ndim <= 3:
        raise UnsupportedFormatError(f"unsupported ndim {ndim}")
    offset = _HEADER.size + 4 * ndim
    if len(buf) < offset:
        raise TruncatedTensorError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, _HEADER.size)
    if any(d == 0 for d in dims):
        raise UnsupportedFormatError(f"zero-sized dimension in {dims}")
    nbytes = math.prod(dims) * _ELEMENT_SIZE[dtype]
    have = len(buf) - offset
    if have < nbytes:
        raise TruncatedTensorError(f"payload has {have} bytes, expected {nbytes}")
    if have > nbytes:
        raise UnsupportedFormatError(f"{have - nbytes} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=math.prod(dims), offset=offset)
    return dims, data.reshape(dims).astype(np.float32, copy=True)


def write_tensor(path, dims, data) -> None:
    """Write ``data`` with shape ``dims`` to ``path`` as an ALTS tensor file."""
    blob = encode_tensor(dims, data)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_tensor(path) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Read an ALTS tensor file.

    Returns
    -------
    dims : tuple of int
    data : ndarray of float32 with shape ``dims``
    """
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def save_array(path, arr) -> None:
    arr = np.asarray(arr)
    write_tensor(path, arr.shape, arr)


def load_array(path) -> np.ndarray:
    return read_tensor(path)[1]


# -- catalogs --------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class TileRecord:
    """One tile and the artifacts produced for it by the upstream model."""

    tile_id: str
    source_image_id: str
    score_stack_path: str
    feature_map_path: str
    mean_map_path: Optional[str] = None
    ground_truth_path: Optional[str] = None

    def to_json(self) -> dict:
        out = {
            "tile_id": self.tile_id,
            "source_image_id": self.source_image_id,
            "score_stack_path": self.score_stack_path,
            "feature_map_path": self.feature_map_path,
        }
        if self.mean_map_path is not None:
            out["mean_map_path"] = self.mean_map_path
        if self.ground_truth_path is not None:
            out["ground_truth_path"] = self.ground_truth_path
        return out


_REQUIRED = ("tile_id", "source_image_id", "score_stack_path", "feature_map_path")
_PATH_FIELDS = (
    "score_stack_path",
    "feature_map_path",
    "mean_map_path",
    "ground_truth_path",
)


def _record_from_obj(obj, lineno, base):
    if not isinstance(obj, dict):
        raise CatalogError(f"line {lineno}: expected a JSON object")
    missing = [f for f in _REQUIRED if f not in obj]
    if missing:
        raise CatalogError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    unknown = set(obj) - set(_REQUIRED) - set(_PATH_FIELDS)
    if unknown:
        raise CatalogError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for name in _REQUIRED + _PATH_FIELDS[2:]:
        value = obj.get(name)
        if value is None:
            continue
        if not isinstance(value, str):
            raise CatalogError(f"line {lineno}: field {name} must be a string")
        if name in _PATH_FIELDS and base is not None:
            value = str(base / value) if not Path(value).is_absolute() else value
        kwargs[name] = value
    return TileRecord(**kwargs)


def load_catalog(path, resolve_paths=True) -> List[TileRecord]:
    """Load a JSON-lines tile catalog.

    Blank lines are ignored. Relative artifact paths are resolved against
    the catalog's directory unless ``resolve_paths`` is False.
    """
    path = Path(path)
    base = path.resolve().parent if resolve_paths else None
    records, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            rec = _record_from_obj(obj, lineno, base)
            if rec.tile_id in seen:
                raise DuplicateTileError(rec.tile_id, lineno)
            seen[rec.tile_id] = lineno
            records.append(rec)
    return records


def save_catalog(records: Sequence[TileRecord], path) -> None:
    seen = set()
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if rec.tile_id in seen:
                raise DuplicateTileError(rec.tile_id)
            seen.add(rec.tile_id)
            fh.write(json.dumps(rec.to_json()) + "\n")


# -- manifests -------------------------------------------------------------


def utc_timestamp() -> str:
    now = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0)
    return now.isoformat().replace("+00:00", "Z")


@dataclasses.dataclass
class SelectionManifest:
    """Ordered result of one selection run.

    ``selected`` holds ``(tile_id, score)`` pairs in selection order; the
    meaning of ``score`` depends on the strategy and may be None.
    """

    strategy: str
    budget: int
    seed: int
    selected: List[Tuple[str, Optional[float]]]
    created_at: str = dataclasses.field(default_factory=utc_timestamp)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if int(self.budget) < 1:
            raise ValueError("budget must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.budget = int(self.budget)
        self.seed = int(self.seed)
        self.selected = [
            (str(t), None if s is None else float(s)) for t, s in self.selected
        ]
        ids = self.tile_ids
        if len(set(ids)) != len(ids):
            raise ValueError("manifest contains duplicate tile ids")
        if self.strategy != "preselect" and len(ids) != self.budget:
            raise ValueError(f"manifest holds {len(ids)} ids for budget {self.budget}")

    @property
    def tile_ids(self) -> List[str]:
        return [t for t, _ in self.selected]

    @property
    def scores(self) -> List[Optional[float]]:
        return [s for _, s in self.selected]

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget": self.budget,
            "seed": self.seed,
            "selected": [{"tile_id": t, "score": s} for t, s in self.selected],
            "created_at": self.created_at,
        }

    @classmethod
    def from_json(cls, obj) -> "SelectionManifest":
        try:
            return cls(
                strategy=obj["strategy"],
                budget=obj["budget"],
                seed=obj["seed"],
                selected=[(e["tile_id"], e["score"]) for e in obj["selected"]],
                created_at=obj["created_at"],
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from exc


def save_manifest(manifest: SelectionManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, allow_nan=False)
        fh.write("\n")


def load_manifest(path) -> SelectionManifest:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return SelectionManifest.from_json(obj)


# -- id-aligned sidecars ---------------------------------------------------


def ids_sidecar_path(tensor_path) -> Path:
    return Path(str(tensor_path) + ".ids.jsonl")


def save_embeddings(path, tile_ids: Sequence[str], embeddings) -> None:
    """Write an (n, c) embedding tensor plus its row-aligned id sidecar."""
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 2 or embeddings.shape[0] != len(tile_ids):
        raise ValueError("embeddings must be (n, c) with one row per tile id")
    write_tensor(path, embeddings.shape, embeddings)
    with open(ids_sidecar_path(path), "w", encoding="utf-8") as fh:
        for tid in tile_ids:
            fh.write(json.dumps({"tile_id": tid}) + "\n")


def load_embeddings(path) -> Tuple[List[str], np.ndarray]:
    dims, data = read_tensor(path)
    if len(dims) != 2:
        raise UnsupportedFormatError(f"embedding tensor must be 2-D, got {dims}")
    ids = [_field(obj, "tile_id", path) for obj in read_jsonl(ids_sidecar_path(path))]
    if len(ids) != dims[0]:
        raise CatalogError(f"id sidecar has {len(ids)} rows, tensor has {dims[0]}")
    if len(set(ids)) != len(ids):
        raise CatalogError("id sidecar contains duplicate tile ids")
    return ids, data


def read_jsonl(path) -> List[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CatalogError(f"{path}: line {lineno}: malformed JSON") from exc
    return out


def _field(obj, name, path):
    if not isinstance(obj, dict) or name not in obj:
        raise CatalogError(f"{path}: row without {name!r}")
    return obj[name]


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, allow_nan=False) + "\n")


def save_scores(path, tile_ids, scores) -> None:
    write_jsonl(path, ({"tile_id": t, "score": float(s)} for t, s in zip(tile_ids, scores)))


def load_scores(path) -> dict:
    scores = {}
    for row in read_jsonl(path):
        tid = _field(row, "tile_id", path)
        if tid in scores:
            raise DuplicateTileError(tid)
        score = _field(row, "score", path)
        if not isinstance(score, (int, float)):
            raise CatalogError(f"{path}: score of {tid!r} is not a number")
        scores[tid] = float(score)
    return scores
