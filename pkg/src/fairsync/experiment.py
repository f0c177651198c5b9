"""Experiment configuration, single runs, sweeps, and their output files."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import POLICIES, make_policy
from .coordinator import RunReport, ShardSet, run
from .core import ContractError, FairnessSpec, RunConfig
from .datagen import Corpus, SynthConfig, extreme_case_corpus, load_corpus, synth_corpus
from .metrics import Evaluation, evaluate

log = logging.getLogger(__name__)

CORPORA = ("synthetic", "extreme", "files")
FILE_FIELDS = ("item_embeddings", "user_embeddings", "groups", "interactions", "relevance")
SWEEPABLE = {"B": int, "m": int, "K": int, "eta": float, "lambda": float, "M": int}


@dataclass
class ExperimentConfig:
    """Every knob of one run. Serialised as a flat JSON object.

    ``lambda`` is spelled ``lam`` in Python and ``lambda`` in JSON.
    """

    corpus: str = "synthetic"
    algorithm: str = "fairsync"
    K: int = 20
    T: int | None = None
    B: int = 8
    eta: float = 1e-2
    M: int = 1
    partition: str = "round_robin"
    lam: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    gradient_scaling: str = "per_step"
    gradient_reduction: str = "mean"
    workers: int = 1
    # minimum exposure profile: one of m, m_file, m_range
    m: int | None = 50
    m_file: str | None = None
    m_range: list[int] | None = None
    esp_inclusive: bool = False
    # synthetic corpus
    group_count: int = 5
    items_per_group: int = 200
    dim: int = 32
    center_spread: float = 1.0
    noise: float = 0.35
    users: int = 2000
    popularity: list[float] | None = None
    affinity_mix: float = 0.2
    relevance_size: int = 10
    # extreme corpus
    extreme_users: int = 10_000
    extreme_per_group: int = 5
    # file corpus
    item_embeddings: str | None = None
    user_embeddings: str | None = None
    groups: str | None = None
    interactions: str | None = None
    relevance: str | None = None
    min_group_size: int = 0
    out: str = "fairsync_out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.corpus not in CORPORA:
            raise ContractError(f"corpus must be one of {CORPORA}")
        if self.algorithm not in POLICIES:
            raise ContractError(f"algorithm must be one of {sorted(POLICIES)}")
        given = [f for f in FILE_FIELDS if getattr(self, f)]
        if self.corpus == "files":
            if not (self.item_embeddings and self.user_embeddings and self.groups):
                raise ContractError("file corpus needs item_embeddings, user_embeddings and groups")
            if bool(self.interactions) == bool(self.relevance):
                raise ContractError("file corpus needs exactly one of interactions or relevance")
        elif given:
            raise ContractError(f"{self.corpus} corpus does not take file fields {given}")
        profiles = [p for p in ("m_file", "m_range") if getattr(self, p) is not None]
        if len(profiles) > 1 or (profiles and self.m is not None):
            raise ContractError("give exactly one of m, m_file, m_range")
        if not profiles and self.m is None:
            raise ContractError("give exactly one of m, m_file, m_range")
        if self.m_range is not None and (len(self.m_range) != 2 or self.m_range[0] > self.m_range[1]):
            raise ContractError("m_range must be [low, high]")
        self.run_config()

    # ------------------------------------------------------------ serialisation

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ContractError(f"unknown config fields {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def replace(self, **changes) -> "ExperimentConfig":
        if "lambda" in changes:
            changes["lam"] = changes.pop("lambda")
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ resolution

    def run_config(self) -> RunConfig:
        return RunConfig(K=self.K, T=self.T, B=self.B, eta=self.eta, M=self.M, algorithm=self.algorithm,
                         lam=self.lam, seed=self.seed, partition=self.partition,
                         gradient_scaling=self.gradient_scaling,
                         gradient_reduction=self.gradient_reduction, optimizer=self.optimizer)

    def build_corpus(self) -> Corpus:
        if self.corpus == "synthetic":
            return synth_corpus(SynthConfig(
                group_count=self.group_count, items_per_group=self.items_per_group, dim=self.dim,
                center_spread=self.center_spread, noise=self.noise, users=self.users,
                popularity=self.popularity, affinity_mix=self.affinity_mix,
                relevance_size=self.relevance_size, seed=self.seed))
        if self.corpus == "extreme":
            return extreme_case_corpus(self.extreme_users, self.extreme_per_group, self.seed)
        mapping = Path(self.out) / "group_mapping.csv"
        mapping.parent.mkdir(parents=True, exist_ok=True)
        return load_corpus(self.item_embeddings, self.groups, self.interactions,
                           user_embeddings=self.user_embeddings, relevance=self.relevance,
                           min_group_size=self.min_group_size, mapping_out=mapping)

    def requirements(self, group_count: int) -> np.ndarray:
        if self.m is not None:
            return np.full(group_count, int(self.m), dtype=np.int64)
        if self.m_range is not None:
            lo, hi = self.m_range
            return np.random.default_rng([self.seed, 1]).integers(lo, hi + 1, size=group_count)
        m = np.zeros(group_count, dtype=np.int64)
        seen = set()
        with open(self.m_file, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader, None) != ["group_id", "m"]:
                raise ContractError(f"{self.m_file}:1: expected header group_id,m")
            for lineno, row in enumerate(reader, start=2):
                try:
                    g, v = int(row[0]), int(row[1])
                except (ValueError, IndexError):
                    raise ContractError(f"{self.m_file}:{lineno}: malformed row") from None
                if not 0 <= g < group_count or v < 0:
                    raise ContractError(f"{self.m_file}:{lineno}: bad group or requirement")
                m[g] = v
                seen.add(g)
        if len(seen) != group_count:
            raise ContractError(f"{self.m_file}: missing groups {sorted(set(range(group_count)) - seen)}")
        return m

    def m_profile(self) -> str:
        if self.m is not None:
            return f"uniform:{self.m}"
        if self.m_range is not None:
            return f"range:{self.m_range[0]}-{self.m_range[1]}"
        return f"file:{Path(self.m_file).name}"


@dataclass
class Outcome:
    config: ExperimentConfig
    corpus: Corpus
    spec: FairnessSpec
    report: RunReport
    evaluation: Evaluation
    extra: dict = field(default_factory=dict)


def execute(cfg: ExperimentConfig, corpus: Corpus | None = None) -> Outcome:
    """Run one configuration in memory without writing anything."""
    corpus = corpus if corpus is not None else cfg.build_corpus()
    T = corpus.T if cfg.T is None else cfg.T
    spec = FairnessSpec(cfg.requirements(corpus.catalog.group_count), T, cfg.K)
    if not spec.feasible:
        raise ContractError(f"infeasible requirements: sum(m)={int(spec.m.sum())} > T*K={T * cfg.K}")
    rc = cfg.run_config()
    shards = ShardSet.from_catalog(corpus.catalog.reshard(cfg.M, cfg.partition), workers=cfg.workers)
    try:
        report = run(corpus.stream(), shards, spec, rc, make_policy(spec, rc))
    finally:
        shards.close()
    return Outcome(cfg, corpus, spec, report, evaluate(report, corpus.relevance, spec, cfg.esp_inclusive))


def _num(x: float) -> str:
    return repr(float(x))


def write_outputs(outcome: Outcome, out_dir=None) -> Path:
    """Write the run artifacts. Everything except ``timing.json`` is deterministic."""
    cfg, report, spec = outcome.config, outcome.report, outcome.spec
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    ev = outcome.evaluation
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "K", "m_profile", "recall", "ndcg", "hr", "esp"])
        w.writerow([cfg.algorithm, cfg.K, cfg.m_profile(), _num(ev.recall), _num(ev.ndcg), _num(ev.hr),
                    _num(ev.esp)])
    group_count = spec.group_count
    with open(out / "candidates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "rank", "item_id", "group_id", "score"])
        for lst in report.candidates:
            for rank, (i, g, s) in enumerate(zip(lst.item_ids, lst.groups, lst.scores), start=1):
                w.writerow([lst.user_id, rank, i, g, _num(s)])
    with open(out / "mu_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"g{g}" for g in range(group_count)])
        for step, mu in report.mu_trace:
            w.writerow([step] + [_num(v) for v in mu])
    summary = {
        "algorithm": report.algorithm,
        "users": report.users,
        "horizon": spec.T,
        "complete": report.complete,
        "K": spec.K,
        "m": spec.m.tolist(),
        "exposures": report.ledger.counts.tolist(),
        "metrics": ev.as_row(),
        "evaluated_users": ev.evaluated,
        "skipped_users": ev.skipped,
        "optimizer_steps": report.updates,
        "shortfall_fills": report.shortfalls,
        "mu_snapshots": [{"step": s, "mu": mu.tolist()} for s, mu in report.mu_trace],
        "final_mu": report.mu_trace[-1][1].tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "timing.json").write_text(json.dumps(report.latency_percentiles(), indent=2) + "\n")
    return out


def _sweep_one(cfg: ExperimentConfig, param: str, value, out: Path) -> dict:
    row = {"param": param, "value": value, "algorithm": cfg.algorithm}
    try:
        run_cfg = cfg.replace(**{param: SWEEPABLE[param](value)})
        if param == "m":
            run_cfg = run_cfg.replace(m_file=None, m_range=None)
        run_cfg = run_cfg.replace(out=str(out / f"{param}={value}"))
        outcome = execute(run_cfg)
        write_outputs(outcome)
        row.update(outcome.evaluation.as_row())
        row.update(outcome.report.latency_percentiles())
        row["optimizer_steps"] = outcome.report.updates
        row["error"] = ""
    except Exception as exc:  # one bad value must not end the sweep
        log.error("sweep %s=%s failed: %s", param, value, exc)
        row["error"] = str(exc)
    return row


SWEEP_COLUMNS = ["param", "value", "algorithm", "recall", "ndcg", "hr", "esp", "p50_ms", "p99_ms",
                 "mean_ms", "optimizer_steps", "error"]


def sweep(cfg: ExperimentConfig, param: str, values, parallel: bool = False) -> list[dict]:
    """One run per value of ``param``; rows also land in ``<out>/sweep.csv``."""
    if param not in SWEEPABLE:
        raise ContractError(f"cannot sweep {param!r}; choose from {sorted(SWEEPABLE)}")
    values = list(values)
    if not values:
        return []
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if parallel:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_sweep_one, [cfg] * len(values), [param] * len(values), values,
                                 [out] * len(values)))
    else:
        rows = [_sweep_one(cfg, param, v, out) for v in values]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return rows
