"""Synthetic corpora, the two-group extreme case, and file loaders.

Embedding files use a small binary layout: the magic ``FSEB``, then the row
count and dimension as little-endian uint32, then row-major little-endian
float32 values. Rows are numbered from zero.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Catalog, ContractError, make_catalog

MAGIC = b"FSEB"
INFREQUENT = "__infrequent__"


class FormatError(ContractError):
    pass


@dataclass
class Corpus:
    catalog: Catalog
    user_ids: np.ndarray
    users: np.ndarray
    relevance: dict[int, set]
    group_labels: list[str] = field(default_factory=list)

    @property
    def T(self) -> int:
        return int(self.users.shape[0])

    def stream(self):
        return zip(self.user_ids.tolist(), self.users)


@dataclass
class SynthConfig:
    group_count: int = 5
    items_per_group: int = 200
    dim: int = 32
    center_spread: float = 1.0
    noise: float = 0.35
    users: int = 2000
    # probability that a user's dominant interest is each group; None = uniform
    popularity: list[float] | None = None
    # weight of the random Dirichlet component in each user's group affinity
    affinity_mix: float = 0.2
    relevance_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.group_count, self.items_per_group, self.dim, self.users, self.relevance_size) < 1:
            raise ContractError("all counts must be >= 1")
        if self.noise < 0 or self.center_spread < 0:
            raise ContractError("noise and spread must be non-negative")
        if not 0 <= self.affinity_mix <= 1:
            raise ContractError("affinity_mix must be in [0, 1]")
        if self.popularity is not None and len(self.popularity) != self.group_count:
            raise ContractError("popularity needs one weight per group")


def exact_relevance(users: np.ndarray, items: np.ndarray, item_ids: np.ndarray, R: int) -> list[set]:
    """Each user's ``R`` closest items by dot-product distance, ties to lower ids."""
    out = []
    for u in users:
        dist = -(items @ u)
        order = np.lexsort((item_ids, dist))[:R]
        out.append(set(item_ids[order].tolist()))
    return out


def _f32(x: np.ndarray) -> np.ndarray:
    # stored embeddings are float32, so keep generated ones on that grid
    return x.astype(np.float32).astype(np.float64)


def synth_corpus(cfg: SynthConfig) -> Corpus:
    """Clustered items and users built as affinity-weighted mixes of group centers."""
    rng = np.random.default_rng(cfg.seed)
    G, n, d = cfg.group_count, cfg.items_per_group, cfg.dim
    centers = rng.normal(size=(G, d))
    centers *= cfg.center_spread / np.linalg.norm(centers, axis=1, keepdims=True)
    groups = np.repeat(np.arange(G), n)
    items = _f32(centers[groups] + cfg.noise * rng.normal(size=(G * n, d)) / np.sqrt(d))
    pop = np.full(G, 1.0 / G) if cfg.popularity is None else np.asarray(cfg.popularity, float)
    pop = pop / pop.sum()
    dominant = rng.choice(G, size=cfg.users, p=pop)
    affinity = (1 - cfg.affinity_mix) * np.eye(G)[dominant]
    affinity += cfg.affinity_mix * rng.dirichlet(np.ones(G), size=cfg.users)
    users = _f32(affinity @ centers + cfg.noise * rng.normal(size=(cfg.users, d)) / np.sqrt(d))
    catalog = make_catalog(items, groups, G)
    rel = exact_relevance(users, catalog.embeddings, catalog.item_ids, cfg.relevance_size)
    user_ids = np.arange(cfg.users)
    return Corpus(catalog, user_ids, users, dict(zip(user_ids.tolist(), rel)),
                  [f"g{g:03d}" for g in range(G)])


def extreme_case_corpus(users: int = 10_000, per_group: int = 5, seed: int = 0) -> Corpus:
    """Two groups everyone agrees about: near items in group 0, far items in group 1.

    Item ``i`` is ``-onehot(i)`` and a user is the vector of their distances,
    so the dot-product distance to item ``i`` is exactly that user's ``i``-th
    entry: uniform in ``[0, 0.4)`` for group 0 and ``[0.4, 1.0)`` for group 1.
    """
    rng = np.random.default_rng(seed)
    n = 2 * per_group
    items = -np.eye(n)
    groups = np.repeat([0, 1], per_group)
    near = rng.uniform(0.0, 0.4, size=(users, per_group))
    far = rng.uniform(0.4, 1.0, size=(users, per_group))
    user_emb = np.hstack([near, far])
    catalog = make_catalog(items, groups, 2)
    relevant = set(range(per_group))
    user_ids = np.arange(users)
    return Corpus(catalog, user_ids, user_emb, {u: set(relevant) for u in user_ids.tolist()},
                  ["g1", "g2"])


# ---------------------------------------------------------------- file formats


def write_embeddings(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ContractError("embedding matrix must be 2-D")
    n, d = matrix.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ids, float64 matrix)`` from a binary or CSV embedding file."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head != MAGIC:
        return _read_embeddings_csv(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", raw, 4)
    body = raw[12:]
    if len(body) != 4 * n * d:
        raise FormatError(f"{path}: expected {4 * n * d} payload bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)
    return np.arange(n), data


def _read_embeddings_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or any(h != f"v{j}" for j, h in enumerate(header[1:])):
            raise FormatError(f"{path}:1: expected header id,v0..v{{d-1}}")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(ids, dtype=np.int64), np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)


def write_embeddings_csv(path, ids, matrix) -> None:
    matrix = np.asarray(matrix)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"v{j}" for j in range(matrix.shape[1])])
        for i, row in zip(ids, matrix):
            w.writerow([int(i)] + [repr(float(v)) for v in row])


def _rows(path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first != header:
            raise FormatError(f"{path}:1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, row


def read_groups(path, min_group_size: int = 0) -> tuple[dict[int, int], list[str]]:
    """Map item ids to dense group ids.

    Labels are numbered in sorted order. Labels with fewer than
    ``min_group_size`` items are folded into one infrequent group.
    """
    labels: dict[int, str] = {}
    for lineno, (item, label) in _rows(path, ["item_id", "group_label"]):
        try:
            item_id = int(item)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad item_id {item!r}") from None
        if item_id in labels:
            raise FormatError(f"{path}:{lineno}: duplicate item_id {item_id}")
        labels[item_id] = label
    if min_group_size > 0:
        sizes: dict[str, int] = {}
        for label in labels.values():
            sizes[label] = sizes.get(label, 0) + 1
        labels = {i: (lab if sizes[lab] >= min_group_size else INFREQUENT) for i, lab in labels.items()}
    names = sorted(set(labels.values()))
    dense = {name: g for g, name in enumerate(names)}
    return {i: dense[lab] for i, lab in labels.items()}, names


def write_groups(path, item_ids, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "group_label"])
        for i, lab in zip(item_ids, labels):
            w.writerow([int(i), lab])


def write_group_mapping(path, names: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_label", "group_id"])
        for g, name in enumerate(names):
            w.writerow([name, g])


def read_interactions(path, known_items=None) -> list[tuple[int, int, int]]:
    out = []
    for lineno, row in _rows(path, ["user_id", "item_id", "timestamp"]):
        try:
            rec = (int(row[0]), int(row[1]), int(row[2]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if known_items is not None and rec[1] not in known_items:
            raise FormatError(f"{path}:{lineno}: unknown item {rec[1]}")
        out.append(rec)
    return out


def write_interactions(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id", "timestamp"])
        w.writerows(rows)


def split_interactions(rows):
    """Chronological 80/10/10 split into train, validation and test."""
    ordered = sorted(rows, key=lambda r: (r[2], r[0], r[1]))
    n = len(ordered)
    n_train = n * 8 // 10
    n_val = n // 10
    return ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:]


def read_relevance(path) -> dict[int, set]:
    rel: dict[int, set] = {}
    for lineno, row in _rows(path, ["user_id", "item_id"]):
        try:
            rel.setdefault(int(row[0]), set()).add(int(row[1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return rel


def write_relevance(path, relevance: dict[int, set]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "item_id"])
        for u in sorted(relevance):
            for i in sorted(relevance[u]):
                w.writerow([u, i])


def load_corpus(item_embeddings, groups, interactions=None, *, user_embeddings=None,
                relevance=None, min_group_size: int = 0, mapping_out=None) -> Corpus:
    """Build a corpus from files.

    With an interactions file the users of the final 10% (by timestamp) form
    the stream, ordered by their first test interaction, and their test
    interactions are the relevance sets. A relevance file instead keeps every
    user in id order. User embeddings are looked up by user id.
    """
    item_ids, item_emb = read_embeddings(item_embeddings)
    group_of, names = read_groups(groups, min_group_size)
    missing = [i for i in item_ids.tolist() if i not in group_of]
    if missing:
        raise FormatError(f"{groups}: no group for items {missing[:5]}")
    catalog = make_catalog(item_emb, [group_of[i] for i in item_ids.tolist()], len(names), item_ids=item_ids)
    if mapping_out is not None:
        write_group_mapping(mapping_out, names)
    known = set(item_ids.tolist())
    if interactions is not None:
        rows = read_interactions(interactions, known)
        _, _, test = split_interactions(rows)
        rel: dict[int, set] = {}
        order: list[int] = []
        for user, item, _ in test:
            if user not in rel:
                order.append(user)
                rel[user] = set()
            rel[user].add(item)
    elif relevance is not None:
        rel = read_relevance(relevance)
        order = sorted(rel)
    else:
        raise ContractError("need an interactions file or a relevance file")
    if user_embeddings is None:
        raise ContractError("need a user embedding file")
    uids, uemb = read_embeddings(user_embeddings)
    row_of = {u: k for k, u in enumerate(uids.tolist())}
    absent = [u for u in order if u not in row_of]
    if absent:
        raise FormatError(f"{user_embeddings}: no embedding for users {absent[:5]}")
    users = uemb[[row_of[u] for u in order]] if order else np.zeros((0, uemb.shape[1]))
    if users.shape[1] != catalog.dim:
        raise FormatError(f"user dimension {users.shape[1]} != item dimension {catalog.dim}")
    return Corpus(catalog, np.asarray(order, dtype=np.int64), users, rel, names)


def save_corpus(corpus: Corpus, directory) -> dict[str, Path]:
    """Write a corpus in the loader's formats; returns the written paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    cat = corpus.catalog
    if not np.array_equal(cat.item_ids, np.arange(cat.size)):
        raise ContractError("binary embedding files need item ids 0..n-1")
    if not np.array_equal(corpus.user_ids, np.arange(corpus.T)):
        raise ContractError("binary embedding files need user ids 0..T-1")
    paths = {
        "item_embeddings": out / "items.fseb",
        "user_embeddings": out / "users.fseb",
        "groups": out / "groups.csv",
        "relevance": out / "relevance.csv",
    }
    write_embeddings(paths["item_embeddings"], cat.embeddings)
    write_embeddings(paths["user_embeddings"], corpus.users)
    labels = corpus.group_labels or [f"g{g:03d}" for g in range(cat.group_count)]
    write_groups(paths["groups"], cat.item_ids, [labels[g] for g in cat.groups])
    write_relevance(paths["relevance"], corpus.relevance)
    return paths
