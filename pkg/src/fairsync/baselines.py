"""Comparison retrieval policies sharing the shard and merge machinery.

``regfair`` and ``ipw`` steer retrieval through the same query tail as
FairSync, with a heuristic dual vector computed from the ledger. ``kneighbor``
and ``uncalibrated`` filter the groups a shard may return instead.
"""

from __future__ import annotations

import numpy as np

from .core import CandidateList, ContractError, ExposureLedger, FairnessSpec, RunConfig, build_query
from .coordinator import FairSyncPolicy, ShardSet, merge_topk, retrieve, to_candidates


def regularized_mu(counts, lam: float) -> np.ndarray:
    """``lam * (e - min(e))``: groups ahead of the worst-off one are pushed away."""
    e = np.asarray(counts, dtype=np.float64)
    return lam * (e - e.min())


def ipw_mu(counts, lam: float) -> np.ndarray:
    """``-lam / (e + 1)``: the less a group has been shown, the bigger its bonus."""
    return -lam / (np.asarray(counts, dtype=np.float64) + 1.0)


def retrieve_regularized_fair(e_u, ledger: ExposureLedger, lam: float, shards: ShardSet, K: int,
                              user_id: int = 0) -> CandidateList:
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return retrieve(e_u, regularized_mu(ledger.counts, lam), shards, K, user_id)


def retrieve_ipw(e_u, ledger: ExposureLedger, lam: float, shards: ShardSet, K: int,
                 user_id: int = 0) -> CandidateList:
    if lam < 0:
        raise ContractError("lambda must be non-negative")
    return retrieve(e_u, ipw_mu(ledger.counts, lam), shards, K, user_id)


def _restricted(e_u, shards: ShardSet, K: int, allowed: set[int], user_id: int):
    """Top-K among ``allowed`` groups, topped up from the rest when they run short.

    Returns the list and whether a top-up was needed.
    """
    if shards.size < K:
        raise ContractError(f"corpus of {shards.size} items is smaller than K={K}")
    q = build_query(e_u, np.zeros(shards.group_count))
    if len(allowed) == shards.group_count:
        return to_candidates(user_id, merge_topk(shards.scatter(q, K), K), shards), False
    pool = int(shards.group_sizes[sorted(allowed)].sum())
    if pool >= K:
        hits = merge_topk(shards.scatter(q, K, allowed), K)
        return to_candidates(user_id, hits, shards), False
    rest = set(range(shards.group_count)) - allowed
    inside = [h for part in shards.scatter(q, K, allowed) for h in part]
    outside = merge_topk(shards.scatter(q, K - pool, rest), K - pool)
    hits = sorted(inside + outside, key=lambda h: (h[1], h[0]))
    return to_candidates(user_id, hits, shards), True


def lowest_exposed_groups(counts, K: int) -> set[int]:
    counts = np.asarray(counts)
    order = np.lexsort((np.arange(len(counts)), counts))
    return set(order[:K].tolist())


def retrieve_k_neighbor(e_u, ledger: ExposureLedger, shards: ShardSet, K: int,
                        user_id: int = 0) -> tuple[CandidateList, bool]:
    """Retrieve only from the ``K`` least-exposed groups (ties to lower ids)."""
    return _restricted(e_u, shards, K, lowest_exposed_groups(ledger.counts, K), user_id)


def unsatisfied_groups(counts, m) -> set[int]:
    return set(np.flatnonzero(np.asarray(counts) < np.asarray(m)).tolist())


def retrieve_uncalibrated(e_u, ledger: ExposureLedger, spec: FairnessSpec, shards: ShardSet, K: int,
                          user_id: int = 0) -> tuple[CandidateList, bool]:
    """Retrieve only from groups still below their requirement, if any are."""
    allowed = unsatisfied_groups(ledger.counts, spec.m) or set(range(shards.group_count))
    return _restricted(e_u, shards, K, allowed, user_id)


class _Baseline:
    name = "plain"

    def __init__(self, spec: FairnessSpec, config: RunConfig):
        self.spec = spec
        self.lam = config.lam
        self.shortfalls = 0

    def current_mu(self, ledger: ExposureLedger) -> np.ndarray:
        return np.zeros(self.spec.group_count)

    def observe(self, lst: CandidateList, ledger: ExposureLedger) -> bool:
        return False


class PlainPolicy(_Baseline):
    name = "plain"

    def retrieve(self, user_id, e_u, ledger, shards):
        return retrieve(e_u, np.zeros(self.spec.group_count), shards, self.spec.K, user_id)


class RegularizedFairPolicy(_Baseline):
    name = "regfair"

    def current_mu(self, ledger):
        return regularized_mu(ledger.counts, self.lam)

    def retrieve(self, user_id, e_u, ledger, shards):
        return retrieve_regularized_fair(e_u, ledger, self.lam, shards, self.spec.K, user_id)


class IPWPolicy(_Baseline):
    name = "ipw"

    def current_mu(self, ledger):
        return ipw_mu(ledger.counts, self.lam)

    def retrieve(self, user_id, e_u, ledger, shards):
        return retrieve_ipw(e_u, ledger, self.lam, shards, self.spec.K, user_id)


class KNeighborPolicy(_Baseline):
    name = "kneighbor"

    def retrieve(self, user_id, e_u, ledger, shards):
        lst, short = retrieve_k_neighbor(e_u, ledger, shards, self.spec.K, user_id)
        self.shortfalls += short
        return lst


class UncalibratedPolicy(_Baseline):
    name = "uncalibrated"

    def retrieve(self, user_id, e_u, ledger, shards):
        lst, short = retrieve_uncalibrated(e_u, ledger, self.spec, shards, self.spec.K, user_id)
        self.shortfalls += short
        return lst


POLICIES = {
    "fairsync": FairSyncPolicy,
    "plain": PlainPolicy,
    "regfair": RegularizedFairPolicy,
    "ipw": IPWPolicy,
    "kneighbor": KNeighborPolicy,
    "uncalibrated": UncalibratedPolicy,
}


def make_policy(spec: FairnessSpec, config: RunConfig):
    try:
        cls = POLICIES[config.algorithm]
    except KeyError:
        raise ContractError(f"unknown algorithm {config.algorithm!r}; choose from {sorted(POLICIES)}") from None
    return cls(spec, config)
