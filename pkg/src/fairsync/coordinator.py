"""The online retrieval loop: scatter/gather in dual space plus dual updates.

A run walks the user stream strictly in order. For each user the current
dual vector is folded into the query, every shard returns its local top-K,
and the coordinator merges them. Exposures go into the ledger, the list's
subgradient goes into a buffer, and every ``B`` users the optimizer moves the
dual vector. Nothing a retrieval sees can change while that retrieval runs.
"""

from __future__ import annotations

import heapq
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import (
    CandidateList,
    Catalog,
    ContractError,
    ExposureLedger,
    FairnessSpec,
    RunConfig,
    build_query,
)
from .optimizer import make_optimizer
from .shard_index import Hit, ShardIndex, build_all, filtered_topk, local_topk

log = logging.getLogger(__name__)


class ShardSet:
    """All shards of one catalog plus the item -> group lookup the gather needs."""

    def __init__(self, indices: Sequence[ShardIndex], group_count: int, workers: int = 1):
        self.indices = list(indices)
        if not self.indices:
            raise ContractError("need at least one shard")
        dims = {ix.dim for ix in self.indices}
        if len(dims) != 1:
            raise ContractError(f"shards disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()
        self.group_count = group_count
        self.size = sum(ix.size for ix in self.indices)
        self.group_of = {}
        for ix in self.indices:
            self.group_of.update(zip(ix.item_ids.tolist(), ix.groups.tolist()))
        self.group_sizes = np.zeros(group_count, dtype=np.int64)
        for ix in self.indices:
            self.group_sizes += np.bincount(ix.groups, minlength=group_count)
        self._pool = ThreadPoolExecutor(workers) if workers > 1 else None

    @classmethod
    def from_catalog(cls, catalog: Catalog, workers: int = 1) -> "ShardSet":
        return cls(build_all(catalog), catalog.group_count, workers)

    def scatter(self, q: np.ndarray, k: int, allowed=None) -> list[list[Hit]]:
        if allowed is None:
            job = lambda ix: local_topk(ix, q, k)  # noqa: E731
        else:
            job = lambda ix: filtered_topk(ix, q, k, allowed)  # noqa: E731
        if self._pool is None:
            return [job(ix) for ix in self.indices]
        # map preserves shard order, so the merge input is the same as serial
        return list(self._pool.map(job, self.indices))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def merge_topk(partials: Iterable[Sequence[Hit]], K: int) -> list[Hit]:
    """Globally smallest ``K`` hits under (score, item_id) order."""
    partials = [p for p in partials if p]
    if sum(len(p) for p in partials) < K:
        raise ContractError(f"only {sum(len(p) for p in partials)} candidates for K={K}")
    merged = heapq.merge(*partials, key=lambda hit: (hit[1], hit[0]))
    return [next(merged) for _ in range(K)]


def to_candidates(user_id: int, hits: Sequence[Hit], shards: ShardSet) -> CandidateList:
    ids = tuple(h[0] for h in hits)
    return CandidateList(
        user_id=user_id,
        item_ids=ids,
        scores=tuple(h[1] for h in hits),
        groups=tuple(shards.group_of[i] for i in ids),
    )


def retrieve(e_u, mu, shards: ShardSet, K: int, user_id: int = 0) -> CandidateList:
    """Exact global top-K by dual distance: local top-K on every shard, then merge."""
    if shards.size < K:
        raise ContractError(f"corpus of {shards.size} items is smaller than K={K}")
    q = build_query(e_u, mu)
    return to_candidates(user_id, merge_topk(shards.scatter(q, K), K), shards)


def subgradient(lst: CandidateList, mu, spec: FairnessSpec, scaling: str = "per_step") -> np.ndarray:
    """Subgradient of the dual objective contributed by one retrieved list.

    With ``exp`` the list's per-group counts and ``g_hat`` the first argmax of
    ``mu``, the ``horizon`` form is ``m_g - exp_g`` off the argmax and
    ``TK - sum_{g != g_hat} m_g - exp_g_hat`` on it. The ``per_step`` form
    divides the horizon budget over ``T`` steps (``m_g / T`` and ``K``), so
    the per-step gradients sum over a run to the gradient of the full
    dual objective.
    """
    mu = np.asarray(mu, dtype=np.float64)
    if len(lst) != spec.K:
        raise ContractError(f"list has {len(lst)} entries, expected K={spec.K}")
    exposed = lst.exposures(spec.group_count).astype(np.float64)
    g_hat = int(np.argmax(mu))
    m = spec.m.astype(np.float64)
    if scaling == "horizon":
        slack = spec.T * spec.K - m.sum()
    elif scaling == "per_step":
        if spec.T == 0:
            raise ContractError("per-step scaling needs T >= 1")
        m = m / spec.T
        slack = spec.K - m.sum()
    else:
        raise ContractError(f"unknown scaling {scaling!r}")
    s = m - exposed
    s[g_hat] += slack
    return s


@dataclass
class GradientBuffer:
    capacity: int
    grads: list = field(default_factory=list)

    def push(self, g: np.ndarray) -> bool:
        """Store ``g``; True once the buffer holds ``capacity`` gradients."""
        if len(self.grads) >= self.capacity:
            raise ContractError("gradient buffer overflow")
        self.grads.append(g)
        return len(self.grads) == self.capacity

    def reduce(self, how: str = "mean") -> np.ndarray:
        total = np.sum(self.grads, axis=0)
        return total / len(self.grads) if how == "mean" else total

    def clear(self):
        self.grads.clear()


class FairSyncPolicy:
    """Dual-space retrieval with buffered optimizer updates of ``mu``."""

    name = "fairsync"

    def __init__(self, spec: FairnessSpec, config: RunConfig):
        self.spec = spec
        self.config = config
        self.mu = np.zeros(spec.group_count)
        self.buffer = GradientBuffer(config.B)
        self.opt = make_optimizer(config.optimizer, spec.group_count, config.eta)
        self.updates = 0

    def current_mu(self, ledger: ExposureLedger) -> np.ndarray:
        return self.mu

    def retrieve(self, user_id, e_u, ledger, shards) -> CandidateList:
        return retrieve(e_u, self.mu, shards, self.spec.K, user_id)

    def observe(self, lst: CandidateList, ledger: ExposureLedger) -> bool:
        s = subgradient(lst, self.mu, self.spec, self.config.gradient_scaling)
        if not self.buffer.push(s):
            return False
        self.mu = self.opt.step(self.mu, self.buffer.reduce(self.config.gradient_reduction))
        self.buffer.clear()
        self.updates += 1
        return True


@dataclass
class RunReport:
    algorithm: str
    candidates: list[CandidateList]
    ledger: ExposureLedger
    mu_trace: list[tuple[int, np.ndarray]]
    latencies: np.ndarray
    complete: bool
    updates: int = 0
    shortfalls: int = 0

    @property
    def users(self) -> int:
        return len(self.candidates)

    def latency_percentiles(self) -> dict:
        if self.latencies.size == 0:
            return {"p50_ms": 0.0, "p99_ms": 0.0, "mean_ms": 0.0}
        ms = self.latencies * 1e3
        return {
            "p50_ms": float(np.percentile(ms, 50)),
            "p99_ms": float(np.percentile(ms, 99)),
            "mean_ms": float(ms.mean()),
        }


def iter_stream(users) -> Iterator[tuple[int, np.ndarray]]:
    """Accept an (n, d) array, or an iterable of ``(user_id, embedding)`` pairs."""
    if isinstance(users, np.ndarray):
        for t, row in enumerate(users):
            yield t, row
    else:
        yield from users


def run(users, shards: ShardSet, spec: FairnessSpec, config: RunConfig, policy=None) -> RunReport:
    """Process the stream in order and return the full run log.

    Refuses to start when the requirements cannot fit in ``T * K`` slots.
    A stream shorter than ``spec.T`` yields a report flagged incomplete.
    """
    if not spec.feasible:
        raise ContractError(f"sum(m)={int(spec.m.sum())} exceeds T*K={spec.T * spec.K}")
    if spec.K != config.K:
        raise ContractError("requirements and run config disagree on K")
    if policy is None:
        policy = FairSyncPolicy(spec, config)
    ledger = ExposureLedger.empty(spec.group_count)
    candidates: list[CandidateList] = []
    latencies = []
    trace = [(0, np.array(policy.current_mu(ledger), dtype=np.float64))]
    stream = iter_stream(users)
    for t in range(1, spec.T + 1):
        try:
            user_id, e_u = next(stream)
        except StopIteration:
            break
        start = time.perf_counter()
        lst = policy.retrieve(user_id, e_u, ledger, shards)
        ledger.record(lst.groups)
        policy.observe(lst, ledger)
        latencies.append(time.perf_counter() - start)
        candidates.append(lst)
        if t % config.B == 0:
            trace.append((t, np.array(policy.current_mu(ledger), dtype=np.float64)))
    complete = len(candidates) == spec.T
    if not complete:
        log.warning("stream ended after %d of %d users", len(candidates), spec.T)
    return RunReport(
        algorithm=getattr(policy, "name", config.algorithm),
        candidates=candidates,
        ledger=ledger,
        mu_trace=trace,
        latencies=np.asarray(latencies),
        complete=complete,
        updates=getattr(policy, "updates", 0),
        shortfalls=getattr(policy, "shortfalls", 0),
    )
