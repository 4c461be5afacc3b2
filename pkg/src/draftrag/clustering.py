"""Document embedding, k-means clustering, and document subset sampling.

The drafting stage works on small document subsets rather than the full
retrieval set. Documents are embedded with an instruction-aware embedding
endpoint, grouped into ``k`` clusters (each cluster is one perspective on the
query), and subsets are sampled one-document-per-cluster so every subset
spans the perspectives present in the retrieval results.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .backend import EndpointDescriptor, TransportError, dispatch
from .core import DataError, Document, Query, SamplingMode

KMEANS_MAX_ITERS = 100
# Rejection sampling gives up after this many draws per requested subset.
SAMPLING_ATTEMPT_FACTOR = 50


@dataclass(frozen=True)
class EmbeddingVector:
    """A fixed-length real vector; ``normalized()`` scales it to unit L2 norm."""

    values: tuple[float, ...]

    @property
    def dims(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def normalized(self) -> "EmbeddingVector":
        arr = self.as_array()
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise DataError("cannot normalize a zero embedding vector")
        return EmbeddingVector(tuple(float(v) for v in arr / norm))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EmbeddingVector":
        return cls(tuple(float(v) for v in np.asarray(arr, dtype=np.float64)))


@dataclass
class ClusterSet:
    """A partition of documents into at most ``k`` clusters.

    ``assignments`` maps every document id to a cluster index; ``sse_history``
    records the within-cluster sum of squared distances after each Lloyd
    iteration (useful for checking the objective never increases).
    """

    assignments: dict[str, int]
    centroids: list[EmbeddingVector]
    doc_order: tuple[str, ...]
    sse_history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def nonempty_count(self) -> int:
        return len(set(self.assignments.values()))

    def nonempty_indices(self) -> list[int]:
        return sorted(set(self.assignments.values()))

    def members(self, cluster_index: int) -> list[str]:
        """Document ids in one cluster, in retrieval order."""
        return [d for d in self.doc_order if self.assignments[d] == cluster_index]

    @property
    def sse(self) -> float:
        return self.sse_history[-1] if self.sse_history else 0.0


@dataclass(frozen=True)
class DocumentSubset:
    """One sampled subset of documents, the unit of drafting."""

    subset_index: int
    member_doc_ids: tuple[str, ...]
    source_clusters: tuple[int, ...]

    def as_set(self) -> frozenset[str]:
        return frozenset(self.member_doc_ids)


@dataclass
class SubsetPlan:
    subsets: list[DocumentSubset]
    notices: list[str] = field(default_factory=list)


def embedding_input(doc: Document) -> str:
    """The string actually embedded for a document: title then text."""
    return f"{doc.title}\n{doc.text}"


def embed_documents(
    docs: list[Document],
    query: Query,
    endpoint: EndpointDescriptor,
    timeout_ms: int,
) -> list[EmbeddingVector]:
    """Embed all documents in one batch request, query text as instruction.

    Returns one unit-norm vector per document, in document order.
    """
    if not docs:
        raise ValueError("embed_documents requires at least one document")
    payload = {
        "instruction": query.text,
        "inputs": [embedding_input(d) for d in docs],
    }
    response = dispatch(endpoint, payload, timeout_ms)
    rows = response.get("embeddings")
    if not isinstance(rows, list) or len(rows) != len(docs):
        raise TransportError(
            endpoint.url,
            f"embedding endpoint returned {0 if rows is None else len(rows)} "
            f"vectors for {len(docs)} inputs",
        )
    dims = len(rows[0])
    vectors = []
    for row in rows:
        if len(row) != dims:
            raise DataError(
                f"embedding dimension mismatch: expected {dims}, got {len(row)}"
            )
        vectors.append(EmbeddingVector(tuple(float(v) for v in row)).normalized())
    return vectors


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, then proportional to D^2."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(closest.sum())
        if total <= 0.0:
            # All remaining points coincide with a chosen center.
            idx = int(rng.integers(n))
        else:
            r = float(rng.random()) * total
            idx = int(np.searchsorted(np.cumsum(closest), r))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        closest = np.minimum(closest, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _lloyd_once(
    points: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    n = points.shape[0]
    centroids = _kmeans_pp_init(points, k, rng)
    assign = np.full(n, -1, dtype=np.int64)
    sse_history: list[float] = []
    for _ in range(KMEANS_MAX_ITERS):
        d2 = _squared_distances(points, centroids)
        new_assign = np.argmin(d2, axis=1)

        # Empty-cluster repair: reseed at the point farthest from its centroid.
        for j in range(k):
            if np.any(new_assign == j):
                continue
            dist_to_own = d2[np.arange(n), new_assign]
            farthest = int(np.argmax(dist_to_own))
            centroids[j] = points[farthest]
            new_assign[farthest] = j
            d2 = _squared_distances(points, centroids)

        sse_history.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            mask = assign == j
            if np.any(mask):
                centroids[j] = points[mask].mean(axis=0)
    return assign, centroids, sse_history


def kmeans_cluster(
    doc_ids: list[str],
    vectors: list[EmbeddingVector],
    k: int,
    rng: np.random.Generator,
    restarts: int = 10,
) -> ClusterSet:
    """Lloyd's algorithm with k-means++ seeding, squared-Euclidean distance.

    Each run iterates to an assignment fixpoint or 100 iterations; if an
    iteration empties a cluster, its centroid is reseeded at the point
    farthest from that point's current centroid. Lloyd's alone can stall in
    poor local optima on small inputs, so the algorithm restarts from fresh
    k-means++ seedings and keeps the lowest-SSE run. Deterministic given
    inputs and rng state.
    """
    n = len(vectors)
    if len(doc_ids) != n:
        raise ValueError("doc_ids and vectors must be parallel")
    if not (1 <= k <= n):
        raise ValueError(f"k must satisfy 1 ≤ k ≤ {n}, got {k}")

    points = np.stack([v.as_array() for v in vectors])
    best: tuple[np.ndarray, np.ndarray, list[float]] | None = None
    for _ in range(max(1, restarts)):
        run = _lloyd_once(points, k, rng)
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    assign, centroids, sse_history = best

    return ClusterSet(
        assignments={doc_ids[i]: int(assign[i]) for i in range(n)},
        centroids=[EmbeddingVector.from_array(c) for c in centroids],
        doc_order=tuple(doc_ids),
        sse_history=tuple(sse_history),
    )


def _canonical(members: list[str], clusters: ClusterSet) -> tuple[tuple[str, ...], tuple[int, ...]]:
    """Order subset members by cluster index, then by retrieval order."""
    rank = {d: i for i, d in enumerate(clusters.doc_order)}
    ordered = sorted(members, key=lambda d: (clusters.assignments[d], rank[d]))
    return tuple(ordered), tuple(clusters.assignments[d] for d in ordered)


def _build(index: int, members: list[str], clusters: ClusterSet) -> DocumentSubset:
    ids, sources = _canonical(members, clusters)
    return DocumentSubset(index, ids, sources)


def _multi_perspective(
    clusters: ClusterSet, m: int, rng: np.random.Generator
) -> tuple[list[list[str]], int]:
    groups = [clusters.members(i) for i in clusters.nonempty_indices()]
    universe = math.prod(len(g) for g in groups)
    if universe <= m:
        return [list(combo) for combo in itertools.product(*groups)], universe
    chosen: list[list[str]] = []
    seen: set[frozenset[str]] = set()
    for _ in range(SAMPLING_ATTEMPT_FACTOR * m):
        pick = [g[int(rng.integers(len(g)))] for g in groups]
        key = frozenset(pick)
        if key not in seen:
            seen.add(key)
            chosen.append(pick)
            if len(chosen) == m:
                break
    return chosen, universe


def _random_no_cluster(
    clusters: ClusterSet, m: int, size: int, rng: np.random.Generator
) -> tuple[list[list[str]], int]:
    pool = list(clusters.doc_order)
    universe = math.comb(len(pool), size)
    if universe <= m:
        return [list(c) for c in itertools.combinations(pool, size)], universe
    chosen: list[list[str]] = []
    seen: set[frozenset[str]] = set()
    for _ in range(SAMPLING_ATTEMPT_FACTOR * m):
        pick = list(rng.choice(len(pool), size=size, replace=False))
        members = [pool[i] for i in sorted(pick)]
        key = frozenset(members)
        if key not in seen:
            seen.add(key)
            chosen.append(members)
            if len(chosen) == m:
                break
    return chosen, universe


def _same_cluster(
    clusters: ClusterSet, m: int, size: int, rng: np.random.Generator
) -> tuple[list[list[str]], int]:
    indices = clusters.nonempty_indices()
    cluster_index = indices[int(rng.integers(len(indices)))]
    pool = clusters.members(cluster_index)
    size = min(size, len(pool))
    universe = math.comb(len(pool), size)
    if universe <= m:
        return [list(c) for c in itertools.combinations(pool, size)], universe
    chosen: list[list[str]] = []
    seen: set[frozenset[str]] = set()
    for _ in range(SAMPLING_ATTEMPT_FACTOR * m):
        pick = list(rng.choice(len(pool), size=size, replace=False))
        members = [pool[i] for i in sorted(pick)]
        key = frozenset(members)
        if key not in seen:
            seen.add(key)
            chosen.append(members)
            if len(chosen) == m:
                break
    return chosen, universe


def sample_subsets(
    clusters: ClusterSet,
    m: int,
    mode: SamplingMode,
    rng: np.random.Generator,
) -> SubsetPlan:
    """Sample up to ``m`` pairwise-distinct document subsets.

    multi_perspective draws one document per non-empty cluster. When fewer
    than ``m`` distinct subsets exist, all of them are returned (in a fixed
    enumeration order) and a truncation notice is recorded. The alternative
    modes match the sampling ablations: random_no_cluster ignores the
    clustering, same_cluster confines one run's subsets to a single cluster.
    """
    if m < 1:
        raise ValueError(f"m must be ≥ 1, got {m}")
    size = clusters.nonempty_count

    if mode is SamplingMode.MULTI_PERSPECTIVE:
        raw, universe = _multi_perspective(clusters, m, rng)
    elif mode is SamplingMode.RANDOM_NO_CLUSTER:
        raw, universe = _random_no_cluster(clusters, m, size, rng)
    elif mode is SamplingMode.SAME_CLUSTER:
        raw, universe = _same_cluster(clusters, m, size, rng)
    else:
        raise ValueError(f"unknown sampling mode: {mode}")

    plan = SubsetPlan(subsets=[_build(i, members, clusters) for i, members in enumerate(raw)])
    if len(plan.subsets) < m:
        plan.notices.append(
            f"subset sampling truncated: requested {m}, "
            f"only {len(plan.subsets)} distinct subsets exist "
            f"(universe {universe}, mode {mode.value})"
        )
    return plan
