"""Per-shard exact top-K search over augmented item embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Catalog, ContractError

Hit = tuple[int, float]


@dataclass(frozen=True)
class ShardIndex:
    shard_id: int
    item_ids: np.ndarray
    groups: np.ndarray
    # augmented rows stored column-major: columns[j] holds coordinate j of every row
    columns: np.ndarray

    @property
    def size(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.columns.shape[0])

    def scores(self, q: np.ndarray) -> np.ndarray:
        """Exact ``-q . h`` for every row.

        Accumulates one coordinate at a time so each row's reduction order is
        fixed and independent of how many rows the shard holds.
        """
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ContractError(f"query has dimension {q.shape}, index expects {self.dim}")
        acc = np.zeros(self.size)
        for j in range(self.dim):
            if q[j] != 0.0:
                acc += self.columns[j] * q[j]
        return -acc


def build_index(catalog: Catalog, shard_id: int) -> ShardIndex:
    if not 0 <= shard_id < catalog.shard_count:
        raise ContractError(f"shard_id {shard_id} out of range [0, {catalog.shard_count})")
    mask = catalog.shards == shard_id
    rows = catalog.augmented()[mask]
    return ShardIndex(
        shard_id=shard_id,
        item_ids=catalog.item_ids[mask].copy(),
        groups=catalog.groups[mask].copy(),
        columns=np.ascontiguousarray(rows.T),
    )


def build_all(catalog: Catalog) -> list[ShardIndex]:
    return [build_index(catalog, s) for s in range(catalog.shard_count)]


def _smallest(scores: np.ndarray, ids: np.ndarray, k: int) -> list[Hit]:
    n = scores.shape[0]
    if n == 0:
        return []
    k = min(k, n)
    if k < n:
        kth = np.partition(scores, k - 1)[k - 1]
        cand = np.flatnonzero(scores <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], scores[cand]))[:k]
    sel = cand[order]
    return list(zip(ids[sel].tolist(), scores[sel].tolist()))


def local_topk(index: ShardIndex, q, k: int) -> list[Hit]:
    """The ``k`` rows closest to ``q`` in dual distance, ties by ascending item id."""
    if k < 1:
        raise ContractError("k must be >= 1")
    return _smallest(index.scores(q), index.item_ids, k)


def filtered_topk(index: ShardIndex, q, k: int, allowed_groups) -> list[Hit]:
    if k < 1:
        raise ContractError("k must be >= 1")
    allowed = np.asarray(sorted(allowed_groups), dtype=np.int64)
    if allowed.size == 0:
        raise ContractError("allowed_groups must be non-empty")
    mask = np.isin(index.groups, allowed)
    scores = index.scores(q)
    return _smallest(scores[mask], index.item_ids[mask], k)
