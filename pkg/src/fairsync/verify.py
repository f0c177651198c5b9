"""Seeded sweeps of the oracle checks, as run by ``fairsync verify``."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .coordinator import subgradient
from .core import build_query, augment_item, base_distance, dual_distance
from .oracle import (
    dual_objective,
    dual_optimum,
    fd_subgradient_check,
    knapsack_closed_form,
    knapsack_enumerate,
    primal_optimum,
    random_instance,
    topk_sum,
)

log = logging.getLogger(__name__)

DUALITY_TOL = 1e-3
FD_TOL = 1e-5
CONCAVITY_TOL = 1e-12
DECOMPOSITION_TOL = 1e-9


@dataclass
class SuiteResult:
    name: str
    checked: int
    passed: bool
    worst: float
    seconds: float
    failure: dict | None = None
    notes: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:<14} checked={self.checked:<6} worst={self.worst:.3e} ({self.seconds:.1f}s)"


def flipped_subgradient(lst, mu, spec, scaling="per_step"):
    """Negative control: the exposure term enters with the wrong sign."""
    s = subgradient(lst, mu, spec, scaling)
    return s + 2.0 * lst.exposures(spec.group_count)


def duality_suite(rng, instances: int, mu_samples: int) -> SuiteResult:
    start = time.perf_counter()
    worst_gap, worst_weak = 0.0, 0.0
    for k in range(instances):
        inst = random_instance(rng)
        primal = primal_optimum(inst).value
        dual = dual_optimum(inst)
        gap = abs(primal - dual.value)
        mus = rng.normal(scale=2.0, size=(mu_samples, inst.group_count))
        weak = float(np.max(primal - dual_objective(mus, inst))) if mu_samples else -np.inf
        worst_gap = max(worst_gap, gap)
        worst_weak = max(worst_weak, weak)
        if gap > DUALITY_TOL or weak > 1e-9:
            failure = {"instance": inst.to_dict(), "primal": primal, "dual": dual.value,
                       "dual_mu": dual.mu.tolist(), "weak_violation": weak}
            return SuiteResult("duality", k + 1, False, gap, time.perf_counter() - start, failure)
    return SuiteResult("duality", instances, True, worst_gap, time.perf_counter() - start,
                       notes={"worst_weak_violation": worst_weak})


def subgradient_suite(rng, pairs: int, grad_fn=subgradient, h: float = 1e-5) -> SuiteResult:
    start = time.perf_counter()
    worst, checked, rejected = 0.0, 0, 0
    while checked < pairs:
        inst = random_instance(rng)
        if inst.group_count < 2:
            continue
        mu = rng.normal(scale=0.5, size=inst.group_count)
        res = fd_subgradient_check(mu, inst, h=h, grad_fn=grad_fn)
        if res.rejected:
            rejected += 1
            continue
        checked += 1
        worst = max(worst, res.max_rel_error)
        if res.max_rel_error > FD_TOL:
            failure = {"instance": inst.to_dict(), "mu": mu.tolist(), "analytic": res.analytic.tolist(),
                       "numeric": res.numeric.tolist(), "rel_errors": res.rel_errors.tolist()}
            return SuiteResult("subgradient", checked, False, worst, time.perf_counter() - start, failure)
    return SuiteResult("subgradient", checked, True, worst, time.perf_counter() - start,
                       notes={"rejected_degenerate": rejected})


def concavity_suite(rng, checks: int) -> SuiteResult:
    start = time.perf_counter()
    worst = -np.inf
    n = rng.integers(1, 30, size=checks)
    for k in range(checks):
        size = int(n[k])
        K = int(rng.integers(1, size + 1))
        x = rng.normal(size=size) * rng.uniform(0.1, 10)
        y = rng.normal(size=size) * rng.uniform(0.1, 10)
        lam = float(rng.uniform())
        excess = float(topk_sum(lam * x + (1 - lam) * y, K) - (lam * topk_sum(x, K) + (1 - lam) * topk_sum(y, K)))
        worst = max(worst, excess)
        if excess > CONCAVITY_TOL:
            failure = {"x": x.tolist(), "y": y.tolist(), "lambda": lam, "K": K, "excess": excess}
            return SuiteResult("concavity", k + 1, False, excess, time.perf_counter() - start, failure)
    return SuiteResult("concavity", checks, True, max(worst, 0.0) if checks else 0.0, time.perf_counter() - start)


def knapsack_suite(rng, checks: int) -> SuiteResult:
    start = time.perf_counter()
    for k in range(checks):
        G = int(rng.integers(1, 6))
        TK = int(rng.integers(0, 13))
        mu = rng.integers(-5, 6, size=G).astype(float)
        m = np.zeros(G, dtype=int)
        for _ in range(int(rng.integers(0, TK + 1))):
            m[rng.integers(G)] += 1
        closed = knapsack_closed_form(mu, m, TK)
        brute = knapsack_enumerate(mu, m, TK)
        if closed != brute:
            failure = {"mu": mu.tolist(), "m": m.tolist(), "TK": TK, "closed": closed, "enumerated": brute}
            return SuiteResult("knapsack", k + 1, False, abs(closed - brute), time.perf_counter() - start, failure)
    return SuiteResult("knapsack", checks, True, 0.0, time.perf_counter() - start)


def decomposition_suite(rng, checks: int, d: int = 32, G: int = 16) -> SuiteResult:
    start = time.perf_counter()
    worst = 0.0
    for k in range(checks):
        e_u, e_i = rng.normal(size=d), rng.normal(size=d)
        mu = rng.normal(size=G)
        g = int(rng.integers(G))
        lhs = dual_distance(build_query(e_u, mu), augment_item(e_i, g, G))
        rhs = base_distance(e_u, e_i) + mu[g]
        scale = 1.0 + np.abs(e_u * e_i).sum() + abs(mu[g])
        err = abs(lhs - rhs) / scale
        worst = max(worst, err)
        if err > DECOMPOSITION_TOL:
            failure = {"e_u": e_u.tolist(), "e_i": e_i.tolist(), "mu": mu.tolist(), "group": g}
            return SuiteResult("decomposition", k + 1, False, err, time.perf_counter() - start, failure)
    return SuiteResult("decomposition", checks, True, worst, time.perf_counter() - start)


def run_verification(budget: int = 100, seed: int = 0, mu_samples: int = 1000,
                     sign_flip: bool = False) -> list[SuiteResult]:
    """Every oracle suite, sized from one budget (the number of tiny instances).

    The other suites scale with it: 5 subgradient pairs, 100 concavity and
    decomposition draws, and 10 knapsack instances per budget unit.
    """
    if budget <= 0:
        log.warning("verification budget is %d; nothing will be checked", budget)
    grad_fn = flipped_subgradient if sign_flip else subgradient
    rng = np.random.default_rng(seed)
    n = max(budget, 0)
    return [
        duality_suite(rng, n, mu_samples),
        subgradient_suite(rng, 5 * n, grad_fn),
        concavity_suite(rng, 100 * n),
        knapsack_suite(rng, 10 * n),
        decomposition_suite(rng, 100 * n),
    ]
