"""Accuracy and exposure-satisfaction metrics over a run."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import CandidateList, FairnessSpec

RelevanceSets = Mapping[int, set]


def _lists(report) -> Sequence[CandidateList]:
    return report.candidates if hasattr(report, "candidates") else report


def _per_user(report, rels: RelevanceSets, score) -> tuple[np.ndarray, int]:
    values, skipped = [], 0
    for lst in _lists(report):
        rel = rels.get(lst.user_id)
        if not rel:
            skipped += 1
            continue
        values.append(score(lst.item_ids, rel))
    return np.asarray(values, dtype=np.float64), skipped


def _recall(items, rel) -> float:
    return len(set(items) & rel) / len(rel)


def _hit(items, rel) -> float:
    return 1.0 if set(items) & rel else 0.0


def _ndcg(items, rel) -> float:
    dcg = sum(1.0 / math.log2(pos + 1) for pos, i in enumerate(items, start=1) if i in rel)
    idcg = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(len(rel), len(items)) + 1))
    return dcg / idcg


def _mean(values: np.ndarray) -> float:
    return float(values.mean()) if values.size else 0.0


def recall_at_n(report, rels: RelevanceSets) -> float:
    return _mean(_per_user(report, rels, _recall)[0])


def hr_at_n(report, rels: RelevanceSets) -> float:
    return _mean(_per_user(report, rels, _hit)[0])


def ndcg_at_n(report, rels: RelevanceSets) -> float:
    """NDCG with the ``1 / log2(pos + 1)`` discount, positions counted from 1."""
    return _mean(_per_user(report, rels, _ndcg)[0])


def exposures(report, group_count: int) -> np.ndarray:
    if hasattr(report, "ledger"):
        return np.asarray(report.ledger.counts)
    counts = np.zeros(group_count, dtype=np.int64)
    for lst in _lists(report):
        counts += lst.exposures(group_count)
    return counts


def esp(report, spec: FairnessSpec, inclusive: bool = False) -> float:
    """Fraction of groups whose exposure beats ``m_g``.

    Strictly greater by default; ``inclusive=True`` counts ``e_g >= m_g``.
    """
    e = exposures(report, spec.group_count)
    ok = e >= spec.m if inclusive else e > spec.m
    return float(ok.mean())


@dataclass
class Evaluation:
    recall: float
    ndcg: float
    hr: float
    esp: float
    evaluated: int
    skipped: int

    def as_row(self) -> dict:
        return {"recall": self.recall, "ndcg": self.ndcg, "hr": self.hr, "esp": self.esp}


def per_user_metrics(report, rels: RelevanceSets) -> dict[str, np.ndarray]:
    """Per-user vectors, for significance testing outside this package."""
    return {
        "recall": _per_user(report, rels, _recall)[0],
        "ndcg": _per_user(report, rels, _ndcg)[0],
        "hr": _per_user(report, rels, _hit)[0],
    }


def evaluate(report, rels: RelevanceSets, spec: FairnessSpec, inclusive: bool = False) -> Evaluation:
    recall, skipped = _per_user(report, rels, _recall)
    return Evaluation(
        recall=_mean(recall),
        ndcg=ndcg_at_n(report, rels),
        hr=hr_at_n(report, rels),
        esp=esp(report, spec, inclusive),
        evaluated=int(recall.size),
        skipped=skipped,
    )
