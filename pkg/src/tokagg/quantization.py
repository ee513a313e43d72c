"""Product quantization of global descriptors.

A d-dimensional vector is split into d/s subvectors; each subspace gets
its own 256-entry codebook trained with seeded k-means, so a code is one
byte per subquantizer. Asymmetric distances between a raw query and
stored codes come from per-subspace lookup tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, StateError

CODEBOOK_SIZE = 256  # 8-bit codes


@dataclass
class PQCodebook:
    dim: int
    subvector_dim: int
    centroids: np.ndarray  # M x 256 x s, float32
    trained: bool = True

    @property
    def num_subquantizers(self) -> int:
        return self.dim // self.subvector_dim

    def __post_init__(self):
        if self.dim % self.subvector_dim != 0:
            raise ConfigurationError(
                f"subvector dim {self.subvector_dim} must divide dim {self.dim}"
            )
        expected = (self.num_subquantizers, CODEBOOK_SIZE, self.subvector_dim)
        if self.centroids.shape != expected:
            raise ConfigurationError(
                f"centroid table is {self.centroids.shape}, expected {expected}"
            )


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """All-pairs squared L2, (n, k); clipped at zero against cancellation."""
    p2 = (points * points).sum(axis=1, keepdims=True)
    c2 = (centroids * centroids).sum(axis=1)
    d = p2 - 2.0 * points @ centroids.T + c2
    np.maximum(d, 0.0, out=d)
    return d


def _plus_plus_seed(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ seeding with incremental min-distance updates.

    When fewer distinct points than k remain (all residual distances are
    zero), the remaining centroids cycle through the points so every
    point still has a zero-distance centroid.
    """
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    min_d = _squared_distances(points, centroids[0:1])[:, 0]
    for j in range(1, k):
        total = min_d.sum()
        if total <= 0.0:
            centroids[j] = points[j % n]
            continue
        target = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(min_d), target))
        idx = min(idx, n - 1)
        centroids[j] = points[idx]
        np.minimum(min_d, _squared_distances(points, centroids[j:j + 1])[:, 0], out=min_d)
    return centroids


def kmeans_fit(
    points: np.ndarray,
    k: int = CODEBOOK_SIZE,
    iters: int = 25,
    seed: int = 0,
) -> np.ndarray:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Assignment ties go to the lowest centroid index; empty clusters are
    re-seeded to the point farthest from its centroid. Distortion is
    asserted non-increasing across iterations.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ConfigurationError(f"kmeans needs an (n, s) point set, got shape {points.shape}")
    if k <= 0:
        raise ConfigurationError(f"k must be positive, got {k}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    centroids = _plus_plus_seed(points, k, rng)

    prev_distortion = None
    prev_assign = None
    for _ in range(iters):
        distances = _squared_distances(points, centroids)
        assign = distances.argmin(axis=1)  # argmin takes the lowest index on ties
        distortion = float(distances[np.arange(points.shape[0]), assign].sum())
        if prev_distortion is not None:
            assert distortion <= prev_distortion * (1.0 + 1e-12) + 1e-12, (
                f"distortion increased: {prev_distortion} -> {distortion}"
            )
        prev_distortion = distortion
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign

        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if empty.size:
            point_dist = distances[np.arange(points.shape[0]), assign]
            farthest = np.argsort(point_dist)[::-1]
            for slot, j in enumerate(empty):
                centroids[j] = points[farthest[slot % points.shape[0]]]
    return centroids


def pq_train(
    descriptors: np.ndarray,
    subvector_dim: int,
    seed: int = 0,
    iters: int = 25,
) -> PQCodebook:
    """Train one k-means codebook per subvector slice, independently."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2 or descriptors.shape[0] < 1:
        raise ConfigurationError(
            f"pq_train needs an (n, d) matrix, got shape {descriptors.shape}"
        )
    d = descriptors.shape[1]
    if d % subvector_dim != 0:
        raise ConfigurationError(f"subvector dim {subvector_dim} must divide dim {d}")
    m = d // subvector_dim
    centroids = np.empty((m, CODEBOOK_SIZE, subvector_dim), dtype=np.float32)
    for i in range(m):
        chunk = descriptors[:, i * subvector_dim:(i + 1) * subvector_dim]
        centroids[i] = kmeans_fit(chunk, CODEBOOK_SIZE, iters, seed + i).astype(np.float32)
    return PQCodebook(dim=d, subvector_dim=subvector_dim, centroids=centroids)


def _require_trained(codebook: PQCodebook):
    if not codebook.trained:
        raise StateError("codebook has not been trained")


def pq_encode(vector: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    """Nearest centroid per slice (ties to the lowest index), one byte each."""
    return pq_encode_many(np.asarray(vector, dtype=np.float64)[None, :], codebook)[0]


def pq_encode_many(matrix: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    _require_trained(codebook)
    matrix = np.asarray(matrix, dtype=np.float64)
    m, s = codebook.num_subquantizers, codebook.subvector_dim
    codes = np.empty((matrix.shape[0], m), dtype=np.uint8)
    for i in range(m):
        chunk = matrix[:, i * s:(i + 1) * s]
        codes[:, i] = _squared_distances(chunk, codebook.centroids[i].astype(np.float64)).argmin(axis=1)
    return codes


def pq_decode(code: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    """Concatenate the selected centroids back into a d-vector."""
    _require_trained(codebook)
    m, s = codebook.num_subquantizers, codebook.subvector_dim
    out = np.empty(codebook.dim)
    for i in range(m):
        out[i * s:(i + 1) * s] = codebook.centroids[i, code[i]]
    return out


def adc_table(query: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    """Per-subspace squared distances from the query to every centroid, M x 256."""
    _require_trained(codebook)
    query = np.asarray(query, dtype=np.float64)
    m, s = codebook.num_subquantizers, codebook.subvector_dim
    table = np.empty((m, CODEBOOK_SIZE))
    for i in range(m):
        diff = codebook.centroids[i].astype(np.float64) - query[i * s:(i + 1) * s]
        table[i] = (diff * diff).sum(axis=1)
    return table


def adc_distance(code: np.ndarray, table: np.ndarray) -> float:
    """Squared distance to a code via M table lookups."""
    return float(table[np.arange(table.shape[0]), code].sum())


def adc_distances_many(codes: np.ndarray, table: np.ndarray) -> np.ndarray:
    return table[np.arange(table.shape[0])[None, :], codes].sum(axis=1)
