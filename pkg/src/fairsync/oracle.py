"""Brute-force checks of the allocation problem and its dual.

Everything here works on tiny dense instances and deliberately avoids the
retrieval code path: scores are a plain ``(T, n)`` matrix, lists come from
sorting, and optima come from enumeration or grid search.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import CandidateList, ContractError, FairnessSpec
from .coordinator import subgradient

MAX_ITEMS = 8
MAX_USERS = 4
MAX_K = 3


@dataclass(frozen=True)
class TinyInstance:
    r: np.ndarray
    groups: np.ndarray
    m: np.ndarray
    K: int

    def __post_init__(self):
        r = np.array(self.r, dtype=np.float64, ndmin=2)
        groups = np.array(self.groups, dtype=np.int64)
        m = np.array(self.m, dtype=np.int64)
        T, n = r.shape
        if n > MAX_ITEMS or T > MAX_USERS or self.K > MAX_K:
            raise ContractError(f"instance too large to enumerate: T={T}, items={n}, K={self.K}")
        if groups.shape != (n,) or self.K < 1 or self.K > n:
            raise ContractError("need one group per item and 1 <= K <= items")
        if groups.min() < 0 or groups.max() >= len(m):
            raise ContractError("group ids out of range")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "m", m)

    @property
    def T(self) -> int:
        return self.r.shape[0]

    @property
    def n_items(self) -> int:
        return self.r.shape[1]

    @property
    def group_count(self) -> int:
        return len(self.m)

    @property
    def spec(self) -> FairnessSpec:
        return FairnessSpec(self.m, self.T, self.K)

    def to_dict(self) -> dict:
        return {"r": self.r.tolist(), "groups": self.groups.tolist(), "m": self.m.tolist(), "K": self.K}

    @classmethod
    def from_dict(cls, d: dict) -> "TinyInstance":
        return cls(np.array(d["r"]), np.array(d["groups"]), np.array(d["m"]), int(d["K"]))


@dataclass
class PrimalResult:
    value: float
    feasible: bool
    lists: list = field(default_factory=list)


def primal_optimum(inst: TinyInstance) -> PrimalResult:
    """Exact optimum of the exposure-constrained allocation.

    Enumerates every K-subset for every user and combines users by dynamic
    programming over per-group exposure counts capped at ``m_g`` (exposure
    beyond the requirement cannot change feasibility, so the cap loses
    nothing).
    """
    G, K = inst.group_count, inst.K
    if int(inst.m.sum()) > inst.T * K:
        return PrimalResult(float("-inf"), False)
    subsets = list(itertools.combinations(range(inst.n_items), K))
    counts = [tuple(np.bincount(inst.groups[list(s)], minlength=G).tolist()) for s in subsets]
    cap = inst.m.tolist()
    states = {(0,) * G: (0.0, ())}
    for t in range(inst.T):
        # best subset per exposure pattern for this user
        best: dict[tuple, tuple[float, tuple]] = {}
        for s, c in zip(subsets, counts):
            v = float(inst.r[t, list(s)].sum())
            if c not in best or v > best[c][0]:
                best[c] = (v, s)
        nxt: dict[tuple, tuple[float, tuple]] = {}
        for state, (val, picks) in states.items():
            for c, (v, s) in best.items():
                key = tuple(min(a + b, hi) for a, b, hi in zip(state, c, cap))
                cand = val + v
                if key not in nxt or cand > nxt[key][0]:
                    nxt[key] = (cand, picks + (s,))
        states = nxt
    goal = tuple(cap)
    if goal not in states:
        return PrimalResult(float("-inf"), False)
    value, picks = states[goal]
    return PrimalResult(value, True, [list(s) for s in picks])


def topk_sum(x, K: int) -> np.ndarray:
    """Sum of the ``K`` largest entries along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    return np.partition(x, n - K, axis=-1)[..., n - K:].sum(axis=-1)


def dual_objective(mu, inst: TinyInstance, cap: bool = True):
    """Dual objective at ``mu``; accepts a single vector or a stack ``(P, |G|)``.

    ``cap=False`` drops the ``max(mu) * (TK - sum m)`` term that comes from
    the ``sum e_g = TK`` constraint, which leaves the objective unbounded
    below along uniform shifts whenever ``sum m < TK``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    single = mu.ndim == 1
    mu = np.atleast_2d(mu)
    if mu.shape[1] != inst.group_count:
        raise ContractError("mu length must equal the group count")
    shifted = inst.r[None, :, :] - mu[:, inst.groups][:, None, :]
    value = topk_sum(shifted, inst.K).sum(axis=1) + mu @ inst.m
    if cap:
        value = value + mu.max(axis=1) * (inst.T * inst.K - inst.m.sum())
    return float(value[0]) if single else value


@dataclass
class DualResult:
    value: float
    mu: np.ndarray
    converged: bool


def dual_optimum(inst: TinyInstance, levels: int = 40, grid_points: int = 20000,
                 polish_iters: int = 400) -> DualResult:
    """Minimise the dual objective by zooming grid search then subgradient polishing.

    The objective is invariant to adding a constant to every coordinate, so
    ``mu_0`` is pinned at zero and the remaining coordinates are searched.
    """
    G = inst.group_count
    if G == 1:
        mu = np.zeros(1)
        return DualResult(dual_objective(mu, inst), mu, True)
    D = G - 1
    span = float(inst.r.max() - inst.r.min()) + 1.0
    per_dim = max(5, int(round(grid_points ** (1.0 / D))))
    if per_dim % 2 == 0:
        per_dim += 1
    centers = [np.zeros(D)]
    half = span
    best_mu, best_val = np.zeros(G), dual_objective(np.zeros(G), inst)
    for _ in range(levels):
        offsets = np.linspace(-half, half, per_dim)
        mesh = np.stack(np.meshgrid(*([offsets] * D), indexing="ij"), axis=-1).reshape(-1, D)
        cands = np.concatenate([c + mesh for c in centers])
        full = np.hstack([np.zeros((len(cands), 1)), cands])
        vals = dual_objective(full, inst)
        order = np.argsort(vals, kind="stable")
        if vals[order[0]] < best_val:
            best_val, best_mu = float(vals[order[0]]), full[order[0]].copy()
        # a few distinct leaders survive each level so a narrow valley is not lost
        centers = [cands[i] for i in order[:3]]
        half = 2.0 * (2.0 * half / (per_dim - 1))
        if half < 1e-12:
            break
    mu, val = _polish(inst, best_mu, best_val, polish_iters, step0=max(half, 1e-6))
    return DualResult(val, mu, converged=True)


def _analytic_gradient(mu: np.ndarray, inst: TinyInstance) -> np.ndarray:
    shifted = inst.r - mu[inst.groups]
    grad = np.asarray(inst.m, dtype=np.float64).copy()
    for row in shifted:
        top = np.lexsort((np.arange(len(row)), -row))[: inst.K]
        grad -= np.bincount(inst.groups[top], minlength=inst.group_count)
    grad[int(np.argmax(mu))] += inst.T * inst.K - inst.m.sum()
    return grad


def _polish(inst, mu, val, iters, step0):
    best_mu, best_val = mu.copy(), val
    cur = mu.copy()
    for k in range(iters):
        g = _analytic_gradient(cur, inst)
        norm = np.linalg.norm(g)
        if norm == 0:
            break
        cur = cur - (step0 / np.sqrt(k + 1)) * g / norm
        v = dual_objective(cur, inst)
        if v < best_val:
            best_mu, best_val = cur.copy(), v
    return best_mu, best_val


def knapsack_closed_form(mu, m, TK: int) -> float:
    """``max sum(mu_g e_g)`` over ``e >= m`` with ``sum(e) = TK``: slack goes to the largest ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    m = np.asarray(m)
    if m.sum() > TK:
        raise ContractError("sum(m) exceeds TK")
    return float(m @ mu + mu.max() * (TK - m.sum()))


def knapsack_enumerate(mu, m, TK: int) -> float:
    """Same optimum by trying every integer split of the slack."""
    mu = np.asarray(mu, dtype=np.float64)
    m = np.asarray(m, dtype=np.int64)
    slack = int(TK - m.sum())
    if slack < 0:
        raise ContractError("sum(m) exceeds TK")
    G = len(mu)
    best = float("-inf")
    # stars and bars: choose G-1 divider positions among slack + G - 1 slots
    for bars in itertools.combinations(range(slack + G - 1), G - 1):
        edges = (-1,) + bars + (slack + G - 1,)
        extra = np.array([edges[i + 1] - edges[i] - 1 for i in range(G)])
        best = max(best, float(mu @ (m + extra)))
    return best


def topk_concavity_check(x, y, lam: float, K: int, tol: float = 1e-12) -> bool:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mixed = topk_sum(lam * x + (1 - lam) * y, K)
    return bool(mixed <= lam * topk_sum(x, K) + (1 - lam) * topk_sum(y, K) + tol)


def greedy_lists(mu, inst: TinyInstance) -> list[CandidateList]:
    """Per-user top-K of ``r - A mu`` by sorting, ties to the lower item index."""
    mu = np.asarray(mu, dtype=np.float64)
    out = []
    for t, row in enumerate(inst.r - mu[inst.groups]):
        top = np.lexsort((np.arange(len(row)), -row))[: inst.K]
        out.append(CandidateList(t, tuple(top.tolist()), tuple((-row[top]).tolist()),
                                 tuple(inst.groups[top].tolist())))
    return out


@dataclass
class FDCheck:
    rejected: bool
    reason: str = ""
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None
    rel_errors: np.ndarray | None = None

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors is not None else float("nan")


def degenerate(mu, inst: TinyInstance, margin: float) -> str:
    """Why the subgradient at ``mu`` is not unique within ``margin``, or ``""``."""
    mu = np.asarray(mu, dtype=np.float64)
    top2 = np.sort(mu)[-2:] if len(mu) > 1 else None
    if top2 is not None and top2[1] - top2[0] <= margin:
        return "argmax of mu is not unique"
    if inst.n_items > inst.K:
        ordered = -np.sort(-(inst.r - mu[inst.groups]), axis=1)
        gaps = ordered[:, inst.K - 1] - ordered[:, inst.K]
        if np.any(gaps <= margin):
            return "tie at the K-th rank"
    return ""


def fd_subgradient_check(mu, inst: TinyInstance, h: float = 1e-5,
                         grad_fn: Callable = subgradient) -> FDCheck:
    """Central differences of the dual objective against the summed per-list subgradients."""
    mu = np.asarray(mu, dtype=np.float64)
    reason = degenerate(mu, inst, margin=4 * h)
    if reason:
        return FDCheck(True, reason)
    spec = inst.spec
    analytic = np.sum([grad_fn(lst, mu, spec, "per_step") for lst in greedy_lists(mu, inst)], axis=0)
    eye = np.eye(inst.group_count)
    numeric = (dual_objective(mu + h * eye, inst) - dual_objective(mu - h * eye, inst)) / (2 * h)
    rel = np.abs(numeric - analytic) / np.maximum(1.0, np.abs(analytic))
    return FDCheck(False, "", analytic, numeric, rel)


def random_instance(rng: np.random.Generator, max_items: int = MAX_ITEMS, max_users: int = MAX_USERS,
                    max_k: int = MAX_K, max_groups: int = 4) -> TinyInstance:
    """A random instance that is feasible (checked by the primal enumeration)."""
    while True:
        n = int(rng.integers(2, max_items + 1))
        G = int(rng.integers(1, min(max_groups, n) + 1))
        groups = np.concatenate([np.arange(G), rng.integers(0, G, n - G)])
        rng.shuffle(groups)
        K = int(rng.integers(1, min(max_k, n) + 1))
        T = int(rng.integers(1, max_users + 1))
        sizes = np.bincount(groups, minlength=G)
        ceiling = T * np.minimum(sizes, K)
        m = np.array([rng.integers(0, c + 1) for c in ceiling])
        if m.sum() > T * K:
            continue
        r = np.round(rng.uniform(-1.0, 1.0, (T, n)), 6)
        inst = TinyInstance(r, groups, m, K)
        if primal_optimum(inst).feasible:
            return inst
