"""
Exact nearest-neighbour search over embedded training rows.

Distances are squared Euclidean on the same standardized embedding the model
consumes. Results are ordered by (distance, row id) so duplicates resolve to
the smallest id.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Tuple

import numpy as np

from errors import ContractViolation

logger = logging.getLogger(__name__)

EmbeddingKind = Literal["raw", "one_hot"]

ONE_HOT_MAX_WIDTH = 100

# Max elements of the (queries, rows, width) difference block
_DISTANCE_BLOCK = 1 << 22


@dataclass(frozen=True)
class RetrievalIndex:
    embeddings: np.ndarray
    row_ids: np.ndarray
    embedding_kind: EmbeddingKind = "raw"

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise ContractViolation("embeddings must be a 2D array")
        if self.row_ids.shape != (self.embeddings.shape[0],):
            raise ContractViolation("row_ids must have one id per embedded row")
        if self.embedding_kind == "one_hot" and self.width > ONE_HOT_MAX_WIDTH:
            raise ContractViolation(
                f"one_hot embedding width {self.width} exceeds {ONE_HOT_MAX_WIDTH}"
            )

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]


def build_index(embeddings: np.ndarray, kind: EmbeddingKind = "raw") -> RetrievalIndex:
    embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
    index = RetrievalIndex(embeddings, np.arange(embeddings.shape[0]), kind)
    logger.debug(f"Built {kind} retrieval index over {index.size} rows, width {index.width}")
    return index


def k_rule(n_train: int, k_max: int) -> int:
    """min(ceil(10 * sqrt(n_train)), k_max, n_train)"""
    if n_train < 1 or k_max < 1:
        raise ContractViolation(f"k_rule needs n_train >= 1 and k_max >= 1, got {n_train}, {k_max}")
    return min(math.ceil(10 * math.sqrt(n_train)), k_max, n_train)


def _select(distances: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """k smallest by (distance, id); distances of excluded rows are +inf."""
    kth = np.partition(distances, k - 1)[k - 1]
    candidates = np.flatnonzero(distances <= kth)
    order = np.lexsort((ids[candidates], distances[candidates]))
    return ids[candidates[order[:k]]]


def squared_distances(index: RetrievalIndex, points: np.ndarray) -> np.ndarray:
    """(m, N) squared distances, computed from explicit differences in blocks."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != index.width:
        raise ContractViolation(f"query width {points.shape[1]} != index width {index.width}")
    block = max(1, _DISTANCE_BLOCK // max(1, index.size * index.width))
    out = np.empty((points.shape[0], index.size))
    for start in range(0, points.shape[0], block):
        diff = points[start:start + block, None, :] - index.embeddings[None, :, :]
        out[start:start + block] = (diff ** 2).sum(axis=-1)
    return out


def knn_query(index: RetrievalIndex, point: np.ndarray, k: int,
              exclude: Optional[Iterable[int]] = None) -> np.ndarray:
    """Ids of the k nearest rows, ascending by (distance, id), skipping excluded ids."""
    excluded = set(int(i) for i in exclude) if exclude is not None else set()
    excluded &= set(range(index.size))
    if not 1 <= k <= index.size - len(excluded):
        raise ContractViolation(
            f"k={k} is not in [1, {index.size - len(excluded)}] (N={index.size}, excluded={len(excluded)})"
        )
    distances = squared_distances(index, point)[0]
    if excluded:
        distances[list(excluded)] = np.inf
    return _select(distances, index.row_ids, k)


def knn_query_batch(index: RetrievalIndex, points: np.ndarray, k: int,
                    exclude_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise knn_query; ``exclude_ids[i]`` (or -1) is skipped for query i."""
    points = np.atleast_2d(points)
    n_excluded = 0 if exclude_ids is None else int(np.any(np.asarray(exclude_ids) >= 0))
    if not 1 <= k <= index.size - n_excluded:
        raise ContractViolation(f"k={k} is not in [1, {index.size - n_excluded}] (N={index.size})")
    distances = squared_distances(index, points)
    if exclude_ids is not None:
        exclude_ids = np.asarray(exclude_ids)
        rows = np.flatnonzero(exclude_ids >= 0)
        distances[rows, exclude_ids[rows]] = np.inf
    return np.stack([_select(distances[i], index.row_ids, k) for i in range(points.shape[0])])


def build_local_context(index: RetrievalIndex, train_labels: np.ndarray, query_point: np.ndarray,
                        k: int, self_id: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Embedded rows and labels of the query's k nearest training rows.

    ``self_id`` names the training row the query came from, which is never
    part of its own context.
    """
    ids = knn_query(index, query_point, k, exclude=None if self_id is None else [self_id])
    return index.embeddings[ids], np.asarray(train_labels)[ids]


@dataclass(frozen=True)
class SharedContextBatch:
    anchors: np.ndarray
    context_ids: np.ndarray
    query_ids: np.ndarray

    def validate(self, index: Optional[RetrievalIndex] = None) -> None:
        """Check disjointness, anchor discard and (given an index) kNN-ball membership."""
        if self.context_ids.shape[0] != self.anchors.shape[0] or self.query_ids.shape[0] != self.anchors.shape[0]:
            raise ContractViolation("shared-context batch rows do not match anchor count")
        for b, anchor in enumerate(self.anchors):
            members = np.concatenate([self.context_ids[b], self.query_ids[b]])
            if np.unique(members).size != members.size:
                raise ContractViolation(f"sequence {b} repeats an id")
            if anchor in members:
                raise ContractViolation(f"sequence {b} contains its anchor {anchor}")
            if index is not None:
                expected = knn_query(index, index.embeddings[anchor], members.size, exclude=[anchor])
                if set(expected.tolist()) != set(members.tolist()):
                    raise ContractViolation(f"sequence {b} is not the kNN set of anchor {anchor}")


def build_shared_context_batch(index: RetrievalIndex, batch_size: int, l_ctx: int, l_qy: int,
                               seed) -> SharedContextBatch:
    """Anchors sampled without replacement; each anchor's k = l_ctx + l_qy nearest
    neighbours (anchor discarded) are shuffled and split into context and queries."""
    k = l_ctx + l_qy
    if batch_size < 1 or l_ctx < 1 or l_qy < 1:
        raise ContractViolation("batch size, context and query lengths must be positive")
    if k > index.size - 1:
        raise ContractViolation(f"dataset of {index.size} rows too small for {k} neighbours plus anchor")
    if batch_size > index.size:
        raise ContractViolation(f"cannot draw {batch_size} distinct anchors from {index.size} rows")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    anchors = rng.choice(index.size, size=batch_size, replace=False)
    neighbours = knn_query_batch(index, index.embeddings[anchors], k, exclude_ids=anchors)
    context_ids = np.empty((batch_size, l_ctx), dtype=np.int64)
    query_ids = np.empty((batch_size, l_qy), dtype=np.int64)
    for b in range(batch_size):
        shuffled = rng.permutation(neighbours[b])
        context_ids[b] = shuffled[:l_ctx]
        query_ids[b] = shuffled[l_ctx:]
    return SharedContextBatch(anchors=index.row_ids[anchors], context_ids=context_ids, query_ids=query_ids)
