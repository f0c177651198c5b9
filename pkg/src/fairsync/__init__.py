"""Exposure-guaranteed distributed dense retrieval in the dual space."""

from .core import (
    CandidateList,
    Catalog,
    ContractError,
    ExposureLedger,
    FairnessSpec,
    RunConfig,
    augment_item,
    base_distance,
    build_query,
    dual_distance,
    make_catalog,
)
from .coordinator import RunReport, ShardSet, merge_topk, retrieve, run, subgradient

__version__ = "0.1.0"

__all__ = [
    "CandidateList",
    "Catalog",
    "ContractError",
    "ExposureLedger",
    "FairnessSpec",
    "RunConfig",
    "RunReport",
    "ShardSet",
    "augment_item",
    "base_distance",
    "build_query",
    "dual_distance",
    "make_catalog",
    "merge_topk",
    "retrieve",
    "run",
    "subgradient",
]
