"""Loading, filtering, and splitting of interaction data and the knowledge graph.

Everything here is plain data preparation: interaction files are turned into
dense-id edge lists, degree-filtered to a k-core, and split per user into
train/validation/test. The knowledge graph is a triple store whose entities
include the catalogue items.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """Malformed record in an input file."""


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


@dataclass
class RawInteractions:
    """Deduplicated implicit-feedback edges plus token vocabularies.

    Edge endpoints are provisional dense ids assigned in order of first
    appearance; ``user_tokens[i]`` is the original token for user id ``i``.
    """

    edges: list[tuple[int, int]]
    user_tokens: list[str]
    item_tokens: list[str]

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)


def load_interactions(path: str | Path) -> RawInteractions:
    """Read a user-item interaction file into a deduplicated edge list.

    The file is UTF-8 text, one interaction per line, tab- or comma-delimited
    (auto-detected from the first non-blank line). Only the first two columns
    (user token, item token) are used; extra columns such as timestamps or
    ratings are ignored. Repeated (user, item) pairs collapse to one edge.
    """
    path = Path(path)
    edges: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    delimiter: str | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if delimiter is None:
                delimiter = _detect_delimiter(line)
            fields = line.split(delimiter)
            if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
                raise ParseError(f"{path}:{lineno}: expected 'user{delimiter}item[...]', got {line!r}")
            u_tok, v_tok = fields[0].strip(), fields[1].strip()
            u = user_ids.setdefault(u_tok, len(user_ids))
            v = item_ids.setdefault(v_tok, len(item_ids))
            if (u, v) not in seen:
                seen.add((u, v))
                edges.append((u, v))
    return RawInteractions(edges=edges, user_tokens=list(user_ids), item_tokens=list(item_ids))


def kcore_filter(edges: list[tuple[int, int]], threshold: int = 5) -> list[tuple[int, int]]:
    """Iteratively drop users and items with degree below ``threshold``.

    Returns the maximal sub-edge-list in which every remaining user and item
    has at least ``threshold`` interactions (possibly empty). Input order is
    preserved; the result does not depend on it.
    """
    if threshold < 1:
        raise ValueError("k-core threshold must be >= 1")
    current = list(edges)
    while True:
        user_deg = Counter(u for u, _ in current)
        item_deg = Counter(v for _, v in current)
        bad_users = {u for u, d in user_deg.items() if d < threshold}
        bad_items = {v for v, d in item_deg.items() if d < threshold}
        if not bad_users and not bad_items:
            return current
        current = [(u, v) for u, v in current if u not in bad_users and v not in bad_items]
        if not current:
            return current


@dataclass
class InteractionDataset:
    """Split interaction data with dense contiguous ids.

    ``train_edges``/``val_edges``/``test_edges`` are (n, 2) int64 arrays of
    (user, item) pairs. Edge rows keep the order of the source file, which is
    what downstream prompt rendering relies on. Per-user and per-item
    adjacency is built from the train split only.
    """

    user_tokens: list[str]
    item_tokens: list[str]
    train_edges: np.ndarray
    val_edges: np.ndarray
    test_edges: np.ndarray
    user_items: list[np.ndarray] = field(init=False, repr=False)
    item_users: list[np.ndarray] = field(init=False, repr=False)
    user_train_items_ordered: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.train_edges = np.asarray(self.train_edges, dtype=np.int64).reshape(-1, 2)
        self.val_edges = np.asarray(self.val_edges, dtype=np.int64).reshape(-1, 2)
        self.test_edges = np.asarray(self.test_edges, dtype=np.int64).reshape(-1, 2)
        by_user: dict[int, list[int]] = defaultdict(list)
        by_item: dict[int, list[int]] = defaultdict(list)
        for u, v in self.train_edges:
            by_user[int(u)].append(int(v))
            by_item[int(v)].append(int(u))
        self.user_train_items_ordered = [
            np.asarray(by_user.get(u, []), dtype=np.int64) for u in range(self.n_users)
        ]
        self.user_items = [np.unique(a) for a in self.user_train_items_ordered]
        self.item_users = [
            np.unique(np.asarray(by_item.get(v, []), dtype=np.int64)) for v in range(self.n_items)
        ]

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    def split_for(self, name: str) -> np.ndarray:
        return {"train": self.train_edges, "val": self.val_edges, "test": self.test_edges}[name]

    def user_item_sets(self) -> list[set[int]]:
        """Per-user train-item sets, built once (used for negative sampling)."""
        cached = getattr(self, "_user_item_sets", None)
        if cached is None:
            cached = [set(a.tolist()) for a in self.user_items]
            object.__setattr__(self, "_user_item_sets", cached)
        return cached


def split_dataset(
    edges: list[tuple[int, int]],
    train_ratio: float = 0.8,
    val_ratio: float = 0.1,
    seed: int = 0,
    user_tokens: list[str] | None = None,
    item_tokens: list[str] | None = None,
) -> InteractionDataset:
    """Per-user train/test split followed by a global validation sample.

    For each user with n interactions, max(1, floor((1 - train_ratio) * n))
    edges are held out for test; the rest form the train pool in file order.
    ``val_ratio`` of the pooled train edges are then moved to validation by a
    global uniform sample that never strips a user's last train edge.
    Deterministic for a fixed seed.
    """
    if not 0.0 < train_ratio < 1.0 or not 0.0 <= val_ratio < 1.0:
        raise ValueError("ratios must lie in (0, 1)")
    # Reindex to contiguous ids over the surviving (filtered) edges.
    user_map: dict[int, int] = {}
    item_map: dict[int, int] = {}
    dense: list[tuple[int, int]] = []
    for u, v in edges:
        du = user_map.setdefault(u, len(user_map))
        dv = item_map.setdefault(v, len(item_map))
        dense.append((du, dv))
    if user_tokens is not None:
        new_user_tokens = [user_tokens[old] for old in user_map]
    else:
        new_user_tokens = [str(old) for old in user_map]
    if item_tokens is not None:
        new_item_tokens = [item_tokens[old] for old in item_map]
    else:
        new_item_tokens = [str(old) for old in item_map]

    per_user: dict[int, list[int]] = defaultdict(list)
    for idx, (u, _) in enumerate(dense):
        per_user[u].append(idx)
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    for u in range(len(new_user_tokens)):
        rows = per_user[u]
        if len(rows) < 2:
            raise ValueError(f"user {u} has {len(rows)} interactions; need >= 2 to split")
        n_test = max(1, int(len(rows) * (1.0 - train_ratio)))
        picked = rng.choice(len(rows), size=n_test, replace=False)
        test_idx.update(rows[i] for i in picked)

    pool = [i for i in range(len(dense)) if i not in test_idx]
    n_val = int(val_ratio * len(pool))
    train_count = Counter(dense[i][0] for i in pool)
    val_idx: set[int] = set()
    for j in rng.permutation(len(pool)):
        if len(val_idx) >= n_val:
            break
        row = pool[j]
        u = dense[row][0]
        if train_count[u] <= 1:
            continue  # never strip a user's last train edge
        val_idx.add(row)
        train_count[u] -= 1

    train = [dense[i] for i in range(len(dense)) if i not in test_idx and i not in val_idx]
    val = [dense[i] for i in sorted(val_idx)]
    test = [dense[i] for i in sorted(test_idx)]
    return InteractionDataset(
        user_tokens=new_user_tokens,
        item_tokens=new_item_tokens,
        train_edges=np.asarray(train, dtype=np.int64).reshape(-1, 2),
        val_edges=np.asarray(val, dtype=np.int64).reshape(-1, 2),
        test_edges=np.asarray(test, dtype=np.int64).reshape(-1, 2),
    )


def save_splits(dataset: InteractionDataset, out_dir: str | Path) -> None:
    """Write train.tsv/val.tsv/test.tsv (dense ids) plus vocab.tsv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        with (out / f"{name}.tsv").open("w", encoding="utf-8") as fh:
            for u, v in dataset.split_for(name):
                fh.write(f"{u}\t{v}\n")
    with (out / "vocab.tsv").open("w", encoding="utf-8") as fh:
        for i, tok in enumerate(dataset.user_tokens):
            fh.write(f"user\t{tok}\t{i}\n")
        for i, tok in enumerate(dataset.item_tokens):
            fh.write(f"item\t{tok}\t{i}\n")


def load_splits(in_dir: str | Path) -> InteractionDataset:
    """Inverse of :func:`save_splits`."""
    indir = Path(in_dir)
    user_tokens: list[str] = []
    item_tokens: list[str] = []
    with (indir / "vocab.tsv").open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3 or fields[0] not in ("user", "item"):
                raise ParseError(f"{indir / 'vocab.tsv'}:{lineno}: bad vocab record")
            target = user_tokens if fields[0] == "user" else item_tokens
            if int(fields[2]) != len(target):
                raise ParseError(f"{indir / 'vocab.tsv'}:{lineno}: ids must be contiguous")
            target.append(fields[1])

    def read_edges(name: str) -> np.ndarray:
        rows = []
        with (indir / f"{name}.tsv").open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    u, v = line.split("\t")[:2]
                    rows.append((int(u), int(v)))
        return np.asarray(rows, dtype=np.int64).reshape(-1, 2)

    return InteractionDataset(
        user_tokens=user_tokens,
        item_tokens=item_tokens,
        train_edges=read_edges("train"),
        val_edges=read_edges("val"),
        test_edges=read_edges("test"),
    )


@dataclass
class KnowledgeGraph:
    """Triple store over named entities and relations.

    Items are a subset of the entities: ``item_to_entity`` maps dataset item
    ids to their entity ids. ``head_index`` lists, for each entity, its
    outgoing (relation, tail) pairs in sorted order.
    """

    entity_names: list[str]
    relation_names: list[str]
    triples: list[tuple[int, int, int]]
    item_to_entity: dict[int, int]
    head_index: dict[int, list[tuple[int, int]]] = field(repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        if not self.head_index:
            index: dict[int, list[tuple[int, int]]] = defaultdict(list)
            for h, r, t in self.triples:
                index[h].append((r, t))
            self.head_index = {h: sorted(pairs) for h, pairs in index.items()}

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    @property
    def item_entities(self) -> set[int]:
        return set(self.item_to_entity.values())

    def outgoing(self, entity_id: int) -> list[tuple[int, int]]:
        return self.head_index.get(entity_id, [])


def load_kg(
    triples_path: str | Path,
    item_map_path: str | Path | None = None,
    item_tokens: list[str] | None = None,
) -> KnowledgeGraph:
    """Load a tab-delimited (head, relation, tail) triple file.

    ``item_map_path`` holds two tab-separated columns, item token and entity
    name, linking dataset items to KG entities. Items without a mapping (or
    mapped to a name the triple file never mentions) end up with an empty
    subgraph; the latter case still registers the entity so the item keeps a
    display name. Duplicate triples collapse to one.
    """
    triples_path = Path(triples_path)
    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    with triples_path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ParseError(f"{triples_path}:{lineno}: expected head\\trelation\\ttail")
            h_name, r_name, t_name = (f.strip() for f in fields[:3])
            h = entity_ids.setdefault(h_name, len(entity_ids))
            r = relation_ids.setdefault(r_name, len(relation_ids))
            t = entity_ids.setdefault(t_name, len(entity_ids))
            if (h, r, t) not in seen:
                seen.add((h, r, t))
                triples.append((h, r, t))

    item_to_entity: dict[int, int] = {}
    if item_map_path is not None:
        mapping: dict[str, str] = {}
        item_map_path = Path(item_map_path)
        with item_map_path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n").rstrip("\r")
                if not line.strip():
                    continue
                fields = line.split("\t")
                if len(fields) < 2:
                    raise ParseError(f"{item_map_path}:{lineno}: expected item_token\\tentity_name")
                mapping[fields[0].strip()] = fields[1].strip()
        tokens = item_tokens if item_tokens is not None else list(mapping)
        for item_id, tok in enumerate(tokens):
            name = mapping.get(tok)
            if name is None:
                log.warning("item %r has no KG mapping; its subgraph is empty", tok)
                continue
            if name not in entity_ids:
                entity_ids[name] = len(entity_ids)
            item_to_entity[item_id] = entity_ids[name]

    return KnowledgeGraph(
        entity_names=list(entity_ids),
        relation_names=list(relation_ids),
        triples=triples,
        item_to_entity=item_to_entity,
    )


def item_display_name(kg: KnowledgeGraph, item_id: int, item_tokens: list[str]) -> str:
    """Entity name of a mapped item, falling back to its raw token."""
    eid = kg.item_to_entity.get(item_id)
    if eid is not None and kg.entity_names[eid].strip():
        return kg.entity_names[eid]
    return item_tokens[item_id]
