"""Nearest-neighbor search and mean-average-precision evaluation.

Search is an exact dot-product scan over unit-norm descriptors or an
asymmetric-distance scan over PQ codes. Evaluation follows the revisited
benchmark protocol: junk items are removed from the ranking before
scoring, and the Medium/Hard protocols differ in which difficulty sets
count as positive versus ignored.
"""

from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, StateError, UndefinedAPError
from .quantization import PQCodebook, adc_distances_many, adc_table


class Protocol(enum.Enum):
    MEDIUM = "medium"
    HARD = "hard"


@dataclass
class QueryGroundTruth:
    query_id: str
    easy: set[str]
    hard: set[str]
    junk: set[str]

    def __post_init__(self):
        if self.easy & self.hard or self.easy & self.junk or self.hard & self.junk:
            raise DataError(f"ground-truth sets overlap for query {self.query_id}")


@dataclass
class GroundTruth:
    queries: list[QueryGroundTruth]

    def by_id(self) -> dict[str, QueryGroundTruth]:
        return {q.query_id: q for q in self.queries}


@dataclass
class Ranking:
    query_id: str
    ids: list[str]  # descending similarity, ties by ascending id
    scores: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise DataError(f"ranking for {self.query_id} repeats database ids")
        if len(self.scores) > 1 and np.any(np.diff(self.scores) > 1e-12):
            raise DataError(f"ranking scores for {self.query_id} are not non-increasing")


@dataclass
class DescriptorIndex:
    """Immutable search index over single-precision unit descriptors."""

    ids: list[str]
    matrix: np.ndarray  # n x d float32, rows unit norm
    codebook: PQCodebook | None = None
    codes: np.ndarray | None = None  # n x M uint8

    @staticmethod
    def build(ids: list[str], matrix: np.ndarray) -> "DescriptorIndex":
        matrix = np.asarray(matrix, dtype=np.float32)
        if len(ids) != matrix.shape[0]:
            raise DataError(f"{len(ids)} ids for {matrix.shape[0]} descriptor rows")
        if len(set(ids)) != len(ids):
            raise DataError("descriptor ids are not unique")
        if matrix.size:
            norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > 1e-4:
                raise DataError(f"descriptor rows must be unit norm (worst deviation {worst:.2e})")
        return DescriptorIndex(ids=list(ids), matrix=matrix)

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def with_pq(self, subvector_dim: int, seed: int = 0, iters: int = 25) -> "DescriptorIndex":
        from .quantization import pq_encode_many, pq_train

        codebook = pq_train(self.matrix.astype(np.float64), subvector_dim, seed, iters)
        codes = pq_encode_many(self.matrix.astype(np.float64), codebook)
        return DescriptorIndex(self.ids, self.matrix, codebook, codes)


def search_topk(index: DescriptorIndex, query: np.ndarray, k: int) -> Ranking:
    """Rank the k nearest database items for a normalized query.

    Exact mode scans dot products descending; PQ mode scans asymmetric
    distances ascending (reported as negated similarities). Ties break by
    ascending database id.
    """
    if index.count == 0:
        raise StateError("index is empty")
    if not 1 <= k <= index.count:
        raise ConfigurationError(f"k={k} must be in [1, {index.count}]")
    query = np.asarray(query, dtype=np.float64)
    if index.codebook is not None and index.codes is not None:
        table = adc_table(query, index.codebook)
        similarities = -adc_distances_many(index.codes, table)
    else:
        similarities = index.matrix.astype(np.float64) @ query
    order = sorted(range(index.count), key=lambda i: (-similarities[i], index.ids[i]))[:k]
    return Ranking(
        query_id="",
        ids=[index.ids[i] for i in order],
        scores=similarities[order],
    )


def average_precision(ranking: Ranking, positives: set[str], junk: set[str]) -> float:
    """Trapezoidal average precision with junk removed before scoring.

    The j-th positive found at cleaned rank k contributes the average of
    the precision just before it ((j-1)/(k-1), taken as 1 at k=1) and the
    precision at it (j/k), divided by the total positive count; positives
    never retrieved contribute nothing.
    """
    if not positives:
        raise UndefinedAPError(f"query {ranking.query_id!r} has no positives")
    found = 0
    ap = 0.0
    rank = 0
    for item in ranking.ids:
        if item in junk:
            continue
        rank += 1
        if item in positives:
            found += 1
            before = 1.0 if rank == 1 else (found - 1) / (rank - 1)
            at = found / rank
            ap += (before + at) / 2.0
    return ap / len(positives)


def evaluate_map(
    rankings: list[Ranking],
    ground_truth: GroundTruth,
    protocol: Protocol,
) -> float:
    """Mean AP under the Medium or Hard positive/junk composition.

    Medium counts easy and hard items as positive; Hard counts only hard
    items and additionally ignores easy ones. Queries whose positive set
    is empty under the protocol are skipped with a warning.
    """
    if isinstance(protocol, str):
        protocol = Protocol(protocol)
    by_id = ground_truth.by_id()
    values = []
    for ranking in rankings:
        gt = by_id.get(ranking.query_id)
        if gt is None:
            raise DataError(f"no ground truth for query {ranking.query_id!r}")
        if protocol is Protocol.MEDIUM:
            positives, junk = gt.easy | gt.hard, gt.junk
        else:
            positives, junk = set(gt.hard), gt.junk | gt.easy
        if not positives:
            warnings.warn(f"query {ranking.query_id!r} has no positives under {protocol.value}; skipped")
            continue
        values.append(average_precision(ranking, positives, junk))
    if not values:
        raise UndefinedAPError("no query has positives under this protocol")
    return float(np.mean(values))


def memory_bytes(count: int, dim: int, subvector_dim: int | None = None) -> int:
    """Exact storage for descriptors: 4 bytes per float, or one byte per subquantizer."""
    if subvector_dim is None:
        return count * dim * 4
    if dim % subvector_dim != 0:
        raise ConfigurationError(f"subvector dim {subvector_dim} must divide dim {dim}")
    return count * (dim // subvector_dim)


@dataclass
class BenchReport:
    mode: str
    count: int
    dim: int
    query_count: int
    mean_latency_s: float
    memory_bytes: int

    def lines(self) -> list[str]:
        gb = self.memory_bytes / 1e9
        return [
            f"mode            {self.mode}",
            f"database size   {self.count} x {self.dim}",
            f"queries         {self.query_count}",
            f"mean latency    {self.mean_latency_s:.6f} s",
            f"memory          {self.memory_bytes} bytes ({gb:.3f} GB)",
        ]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "count": self.count,
            "dim": self.dim,
            "query_count": self.query_count,
            "mean_latency_s": self.mean_latency_s,
            "memory_bytes": self.memory_bytes,
        }


def bench(index: DescriptorIndex, queries: np.ndarray, k: int = 10) -> BenchReport:
    """Single-thread mean search latency plus exact memory accounting."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ConfigurationError(f"queries must be (n, d), got shape {queries.shape}")
    k = min(k, index.count)
    pq_mode = index.codebook is not None
    search_topk(index, queries[0], k)  # warm caches before timing
    started = time.perf_counter()
    for q in queries:
        search_topk(index, q, k)
    elapsed = time.perf_counter() - started
    sub = index.codebook.subvector_dim if pq_mode else None
    return BenchReport(
        mode="pq" if pq_mode else "exact",
        count=index.count,
        dim=index.dim,
        query_count=queries.shape[0],
        mean_latency_s=elapsed / queries.shape[0],
        memory_bytes=memory_bytes(index.count, index.dim, sub),
    )
