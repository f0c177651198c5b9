"""Domain types and the dual-space embedding algebra.

Items live in a ``d + |G|`` dimensional space where the last ``|G|`` entries
are a one-hot group indicator. Queries carry ``-mu`` in the same tail, so the
negated dot product of the two equals the base distance plus ``mu[group]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


def _vector(values, name: str = "vector") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} has non-finite entries")
    return arr


def base_distance(e_u, e_i) -> float:
    """Dot-product distance ``-e_u . e_i``."""
    u = _vector(e_u, "user embedding")
    i = _vector(e_i, "item embedding")
    if u.shape != i.shape:
        raise ContractError(f"dimension mismatch: {u.shape[0]} vs {i.shape[0]}")
    return -float(u @ i)


def augment_item(e_i, group_id: int, group_count: int) -> np.ndarray:
    """Concatenate the item embedding with the one-hot of its group."""
    if not 0 <= group_id < group_count:
        raise ContractError(f"group_id {group_id} out of range [0, {group_count})")
    e = _vector(e_i, "item embedding")
    tail = np.zeros(group_count)
    tail[group_id] = 1.0
    return np.concatenate([e, tail])


def build_query(e_u, mu) -> np.ndarray:
    """Concatenate the user embedding with the negated dual vector."""
    return np.concatenate([_vector(e_u, "user embedding"), -_vector(mu, "mu")])


def dual_distance(q, h) -> float:
    q = _vector(q, "query")
    h = _vector(h, "augmented item")
    if q.shape != h.shape:
        raise ContractError(f"dimension mismatch: {q.shape[0]} vs {h.shape[0]}")
    return -float(q @ h)


@dataclass(frozen=True)
class Catalog:
    """Items with base embeddings, one group and one shard each.

    Rows are kept in ascending ``item_id`` order so every derived structure
    (shards, oracle matrices) sees the same deterministic layout.
    """

    item_ids: np.ndarray
    embeddings: np.ndarray
    groups: np.ndarray
    shards: np.ndarray
    group_count: int
    shard_count: int = 1

    def __post_init__(self):
        ids = np.asarray(self.item_ids, dtype=np.int64)
        emb = np.asarray(self.embeddings, dtype=np.float64)
        groups = np.asarray(self.groups, dtype=np.int64)
        shards = np.asarray(self.shards, dtype=np.int64)
        if emb.ndim != 2 or emb.shape[0] != ids.shape[0]:
            raise ContractError("embeddings must be an (n, d) array aligned with item_ids")
        if groups.shape != ids.shape or shards.shape != ids.shape:
            raise ContractError("groups and shards must align with item_ids")
        if len(np.unique(ids)) != len(ids):
            raise ContractError("item_ids must be unique")
        if not np.all(np.isfinite(emb)):
            raise ContractError("embeddings have non-finite entries")
        if len(ids) and (groups.min() < 0 or groups.max() >= self.group_count):
            raise ContractError("group ids must lie in [0, group_count)")
        if len(ids) and (shards.min() < 0 or shards.max() >= self.shard_count):
            raise ContractError("shard ids must lie in [0, shard_count)")
        present = np.bincount(groups, minlength=self.group_count)
        if np.any(present == 0):
            empty = np.flatnonzero(present == 0).tolist()
            raise ContractError(f"groups {empty} have no items")
        order = np.argsort(ids, kind="stable")
        for name, arr in (("item_ids", ids), ("embeddings", emb), ("groups", groups), ("shards", shards)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.groups, minlength=self.group_count)

    def augmented(self) -> np.ndarray:
        """All ``h_i`` rows stacked, shape ``(n, d + |G|)``."""
        tail = np.zeros((self.size, self.group_count))
        tail[np.arange(self.size), self.groups] = 1.0
        return np.hstack([self.embeddings, tail])

    def reshard(self, shard_count: int, scheme: str = "round_robin") -> "Catalog":
        return Catalog(
            self.item_ids,
            self.embeddings,
            self.groups,
            partition(self.item_ids, shard_count, scheme),
            self.group_count,
            shard_count,
        )


def partition(item_ids, shard_count: int, scheme: str = "round_robin") -> np.ndarray:
    """Assign every item to a shard.

    ``round_robin`` deals items in ascending id order; ``hash`` uses a
    multiplicative hash of the id so assignment does not depend on which
    other items exist.
    """
    if shard_count < 1:
        raise ContractError("shard_count must be >= 1")
    ids = np.asarray(item_ids, dtype=np.int64)
    if scheme == "round_robin":
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(ids, kind="stable")] = np.arange(len(ids))
        return rank % shard_count
    if scheme == "hash":
        mixed = (ids.astype(np.uint64) * np.uint64(2654435761)) % np.uint64(2**32)
        return (mixed % np.uint64(shard_count)).astype(np.int64)
    raise ContractError(f"unknown partition scheme {scheme!r}")


def make_catalog(embeddings, groups, group_count: int | None = None, *, item_ids=None,
                 shard_count: int = 1, scheme: str = "round_robin") -> Catalog:
    emb = np.asarray(embeddings, dtype=np.float64)
    groups = np.asarray(groups, dtype=np.int64)
    if item_ids is None:
        item_ids = np.arange(emb.shape[0])
    if group_count is None:
        group_count = int(groups.max()) + 1
    return Catalog(item_ids, emb, groups, partition(item_ids, shard_count, scheme),
                   group_count, shard_count)


@dataclass(frozen=True)
class FairnessSpec:
    """Per-group minimum exposures over a horizon of ``T`` lists of size ``K``."""

    m: np.ndarray
    T: int
    K: int

    def __post_init__(self):
        m = np.array(self.m, dtype=np.int64)
        if m.ndim != 1 or np.any(m < 0):
            raise ContractError("m must be a vector of non-negative integers")
        if self.T < 0 or self.K < 1:
            raise ContractError("need T >= 0 and K >= 1")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def group_count(self) -> int:
        return int(self.m.shape[0])

    @property
    def feasible(self) -> bool:
        return int(self.m.sum()) <= self.T * self.K

    @classmethod
    def uniform(cls, value: int, group_count: int, T: int, K: int) -> "FairnessSpec":
        return cls(np.full(group_count, value), T, K)


@dataclass
class ExposureLedger:
    """Cumulative per-group exposure; mutated only by the coordinator."""

    counts: np.ndarray
    steps_seen: int = 0

    @classmethod
    def empty(cls, group_count: int) -> "ExposureLedger":
        return cls(np.zeros(group_count, dtype=np.int64))

    def record(self, groups: Sequence[int]) -> np.ndarray:
        exposed = np.bincount(np.asarray(groups, dtype=np.int64), minlength=len(self.counts))
        self.counts += exposed
        self.steps_seen += 1
        return exposed

    def copy(self) -> "ExposureLedger":
        return ExposureLedger(self.counts.copy(), self.steps_seen)


@dataclass(frozen=True)
class CandidateList:
    """One retrieved list, ascending by dual distance then item id."""

    user_id: int
    item_ids: tuple[int, ...]
    scores: tuple[float, ...]
    groups: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.item_ids)

    def exposures(self, group_count: int) -> np.ndarray:
        return np.bincount(np.asarray(self.groups, dtype=np.int64), minlength=group_count)


@dataclass
class RunConfig:
    K: int = 20
    T: int | None = None
    B: int = 8
    eta: float = 1e-2
    M: int = 1
    algorithm: str = "fairsync"
    lam: float = 0.0
    seed: int = 0
    partition: str = "round_robin"
    gradient_scaling: str = "per_step"
    gradient_reduction: str = "mean"
    optimizer: str = "adam"

    def __post_init__(self):
        if self.K < 1 or self.B < 1 or self.M < 1:
            raise ContractError("K, B and M must all be >= 1")
        if not self.eta > 0:
            raise ContractError("eta must be positive")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.gradient_scaling not in ("per_step", "horizon"):
            raise ContractError(f"unknown gradient_scaling {self.gradient_scaling!r}")
        if self.gradient_reduction not in ("mean", "sum"):
            raise ContractError(f"unknown gradient_reduction {self.gradient_reduction!r}")
