"""Binary and JSON artifact formats.

Bulk numeric data uses fixed-layout little-endian binaries (bit-exact
round trips); configuration and ground truth use JSON. Checkpoints store
float64, feature maps and descriptors float32, matching the precision
split between training and retrieval.

    TKFM  magic, version u32, C/H/W u32, payload f32 [C][H][W]
    TKGD  magic, version u32, count u32, dim u32, ids, payload f32 rows
    TKCK  magic, version u32, config JSON, named f64 tensor table
    TKPQ  magic, version u32, d/s/M u32, centroids f32
    TKPC  magic, count u32, M u32, raw code bytes
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .quantization import CODEBOOK_SIZE, PQCodebook
from .refinement import ModelConfig, ModelParams, init_model
from .retrieval import GroundTruth, QueryGroundTruth, Ranking

FORMAT_VERSION = 1


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated {what}: expected {count} bytes, "
                f"got {len(self.blob) - self.offset}",
                offset=self.offset,
            )
        out = self.blob[self.offset:self.offset + count]
        self.offset += count
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FormatError(
                f"{self.path}: bad magic {got!r}, expected {magic!r}", offset=0
            )

    def expect_version(self, expected: int):
        at = self.offset
        version = self.u32("version")
        if version != expected:
            raise FormatError(
                f"{self.path}: unsupported version {version}, expected {expected}",
                offset=at,
            )

    def expect_end(self):
        if self.offset != len(self.blob):
            raise FormatError(
                f"{self.path}: {len(self.blob) - self.offset} trailing bytes",
                offset=self.offset,
            )


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataError(f"string too long to encode: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def _read_str(reader: _Reader, what: str) -> str:
    length = reader.u16(what)
    return reader.take(length, what).decode("utf-8")


# --- TKFM: feature maps ----------------------------------------------------

def write_tkfm(path, values: np.ndarray):
    values = np.asarray(values)
    if values.ndim != 3:
        raise DataError(f"feature map must be 3-D, got shape {values.shape}")
    c, h, w = values.shape
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"TKFM")
        fh.write(struct.pack("<IIII", FORMAT_VERSION, c, h, w))
        fh.write(payload)


def read_tkfm(path) -> np.ndarray:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"TKFM")
    reader.expect_version(FORMAT_VERSION)
    c = reader.u32("channel count")
    h = reader.u32("height")
    w = reader.u32("width")
    payload = reader.take(4 * c * h * w, "feature payload")
    reader.expect_end()
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float64)


# --- TKGD: descriptor sets ---------------------------------------------------

def write_tkgd(path, ids: list[str], matrix: np.ndarray):
    matrix = np.asarray(matrix)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DataError(
            f"descriptor matrix {matrix.shape} does not match {len(ids)} ids"
        )
    if len(set(ids)) != len(ids):
        raise DataError("descriptor ids are not unique")
    with open(path, "wb") as fh:
        fh.write(b"TKGD")
        fh.write(struct.pack("<III", FORMAT_VERSION, matrix.shape[0], matrix.shape[1]))
        for item in ids:
            fh.write(_pack_str(item))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_tkgd(path) -> tuple[list[str], np.ndarray]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"TKGD")
    reader.expect_version(FORMAT_VERSION)
    count = reader.u32("descriptor count")
    dim = reader.u32("descriptor dim")
    ids = [_read_str(reader, "descriptor id") for _ in range(count)]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: descriptor ids are not unique")
    payload = reader.take(4 * count * dim, "descriptor payload")
    reader.expect_end()
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return ids, matrix.copy()


# --- TKCK: checkpoints -------------------------------------------------------

def write_tkck(path, params: ModelParams, extra: dict | None = None):
    header = {"config": params.config.to_dict(), "extra": extra or {}}
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = params.named_tensors()
    with open(path, "wb") as fh:
        fh.write(b"TKCK")
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_raw)))
        fh.write(header_raw)
        fh.write(struct.pack("<I", len(tensors)))
        for name, tensor in tensors:
            fh.write(_pack_str(name))
            fh.write(struct.pack("<I", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def read_tkck(path) -> tuple[ModelParams, dict]:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"TKCK")
    reader.expect_version(FORMAT_VERSION)
    header_len = reader.u32("header length")
    header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    count = reader.u32("tensor count")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = _read_str(reader, "tensor name")
        ndim = reader.u32("tensor rank")
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim, "tensor shape"))
        size = int(np.prod(shape)) if shape else 1
        payload = reader.take(8 * size, f"tensor {name} payload")
        table[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    reader.expect_end()

    num_classes = table["classifier.weight"].shape[0] if "classifier.weight" in table else None
    params = init_model(config, num_classes, seed=0)
    names = dict(params.named_tensors())
    if set(names) != set(table):
        raise FormatError(
            f"{path}: tensor table mismatch: missing {sorted(set(names) - set(table))}, "
            f"unexpected {sorted(set(table) - set(names))}"
        )
    for name, tensor in names.items():
        stored = table[name]
        if stored.shape != tensor.data.shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {stored.shape}, expected {tensor.data.shape}"
            )
        tensor.data = stored
    return params, header.get("extra", {})


# --- TKPQ / TKPC: codebooks and codes ---------------------------------------

def write_tkpq(path, codebook: PQCodebook):
    with open(path, "wb") as fh:
        fh.write(b"TKPQ")
        fh.write(struct.pack(
            "<IIII", FORMAT_VERSION, codebook.dim,
            codebook.subvector_dim, codebook.num_subquantizers,
        ))
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())


def read_tkpq(path) -> PQCodebook:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"TKPQ")
    reader.expect_version(FORMAT_VERSION)
    dim = reader.u32("dim")
    sub = reader.u32("subvector dim")
    m = reader.u32("subquantizer count")
    if sub * m != dim:
        raise FormatError(f"{path}: inconsistent geometry d={dim}, s={sub}, M={m}")
    payload = reader.take(4 * m * CODEBOOK_SIZE * sub, "centroid payload")
    reader.expect_end()
    centroids = np.frombuffer(payload, dtype="<f4").reshape(m, CODEBOOK_SIZE, sub)
    return PQCodebook(dim=dim, subvector_dim=sub, centroids=centroids.copy())


def write_tkpc(path, codes: np.ndarray):
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise DataError(f"codes must be (n, M), got shape {codes.shape}")
    with open(path, "wb") as fh:
        fh.write(b"TKPC")
        fh.write(struct.pack("<II", codes.shape[0], codes.shape[1]))
        fh.write(codes.tobytes())


def read_tkpc(path) -> np.ndarray:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.expect_magic(b"TKPC")
    count = reader.u32("code count")
    m = reader.u32("subquantizer count")
    payload = reader.take(count * m, "code payload")
    reader.expect_end()
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, m).copy()


# --- JSON artifacts ----------------------------------------------------------

def _dump_json(path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc


def write_ground_truth(path, ground_truth: GroundTruth):
    payload = {
        "queries": [
            {
                "id": q.query_id,
                "easy": sorted(q.easy),
                "hard": sorted(q.hard),
                "junk": sorted(q.junk),
            }
            for q in ground_truth.queries
        ]
    }
    _dump_json(path, payload)


def read_ground_truth(path) -> GroundTruth:
    payload = _load_json(path)
    if "queries" not in payload:
        raise FormatError(f"{path}: missing 'queries'")
    queries = []
    for entry in payload["queries"]:
        try:
            queries.append(QueryGroundTruth(
                query_id=entry["id"],
                easy=set(entry.get("easy", [])),
                hard=set(entry.get("hard", [])),
                junk=set(entry.get("junk", [])),
            ))
        except KeyError as exc:
            raise FormatError(f"{path}: ground-truth entry missing {exc}") from exc
    return GroundTruth(queries)


def write_manifest(path, items: list[dict], skipped: list[dict] | None = None):
    """Feature-set manifest: per item an id, optional label, and per-scale paths."""
    _dump_json(path, {"items": items, "skipped": skipped or []})


def read_manifest(path) -> dict:
    payload = _load_json(path)
    if "items" not in payload:
        raise FormatError(f"{path}: missing 'items'")
    for entry in payload["items"]:
        if "id" not in entry or "scales" not in entry:
            raise FormatError(f"{path}: manifest items need 'id' and 'scales'")
    return payload


def write_rankings_tsv(path, rankings: list[Ranking]):
    with open(path, "w", encoding="utf-8") as fh:
        for ranking in rankings:
            for rank, (item, score) in enumerate(zip(ranking.ids, ranking.scores), start=1):
                fh.write(f"{ranking.query_id}\t{rank}\t{item}\t{float(score)!r}\n")


def read_rankings_tsv(path) -> list[Ranking]:
    grouped: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{line_no}: expected 4 tab-separated fields")
            query_id, rank, item, score = parts
            grouped.setdefault(query_id, []).append((int(rank), item, float(score)))
    rankings = []
    for query_id, rows in grouped.items():
        rows.sort(key=lambda r: r[0])
        rankings.append(Ranking(
            query_id=query_id,
            ids=[r[1] for r in rows],
            scores=np.array([r[2] for r in rows]),
        ))
    return rankings
