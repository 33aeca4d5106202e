"""Exact top-k semantic neighbour graph over item embeddings.

Similarity is plain cosine. The full pairwise similarity matrix is never
materialised; rows are processed in fixed-size blocks so memory stays at
O(block * n_items). Ties are broken by ascending item id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


def cosine_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine of the angle between two nonzero vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(x @ y / (nx * ny))


@dataclass
class ItemItemGraph:
    """Per-item neighbour lists, similarity-descending, id tie-break.

    ``neighbor_ids`` and ``neighbor_sims`` are rectangular (n_items, k')
    arrays with k' = min(k, n_items - 1).
    """

    k: int
    neighbor_ids: np.ndarray
    neighbor_sims: np.ndarray

    @property
    def n_items(self) -> int:
        return self.neighbor_ids.shape[0]

    @property
    def width(self) -> int:
        return self.neighbor_ids.shape[1]

    def neighbors(self, item_id: int) -> list[tuple[int, float]]:
        return [
            (int(j), float(s))
            for j, s in zip(self.neighbor_ids[item_id], self.neighbor_sims[item_id])
        ]


def _topk_from_matrix(matrix: np.ndarray, k: int, block: int = 256) -> ItemItemGraph:
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if not 0 <= k < max(n, 1):
        raise ValueError(f"k must satisfy 0 <= k < n_items, got k={k}, n_items={n}")
    norms = np.linalg.norm(matrix, axis=1)
    zero_rows = np.nonzero(norms == 0.0)[0]
    if zero_rows.size:
        raise ValueError(f"zero embedding vector for items {zero_rows.tolist()}")
    unit = matrix / norms[:, None]
    width = min(k, n - 1)
    ids = np.empty((n, width), dtype=np.int64)
    sims = np.empty((n, width), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        block_sims = unit[start:stop] @ unit.T
        for row in range(start, stop):
            block_sims[row - start, row] = -np.inf  # no self-loop
        # Stable argsort on the negated sims keeps ascending-id order on ties.
        order = np.argsort(-block_sims, axis=1, kind="stable")[:, :width]
        ids[start:stop] = order
        sims[start:stop] = np.take_along_axis(block_sims, order, axis=1)
    return ItemItemGraph(k=k, neighbor_ids=ids, neighbor_sims=sims)


def top_k_neighbors(table, k: int, block: int = 256) -> ItemItemGraph:
    """Exact top-k cosine neighbours for every item in the embedding table."""
    n_items = len(table.item_vectors)
    return _topk_from_matrix(table.item_matrix(n_items), k, block=block)


def save_graph(graph: ItemItemGraph, path: str | Path) -> None:
    """One line per item: ``item_id<TAB>nbr:sim ...`` with six-decimal sims."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(graph.n_items):
            if graph.width == 0:
                fh.write(f"{i}\n")
                continue
            entries = " ".join(
                f"{int(j)}:{s:.6f}" for j, s in zip(graph.neighbor_ids[i], graph.neighbor_sims[i])
            )
            fh.write(f"{i}\t{entries}\n")


def load_graph(path: str | Path) -> ItemItemGraph:
    rows: list[list[tuple[int, float]]] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            item_id = int(parts[0])
            if item_id != len(rows):
                raise ValueError(f"{path}: expected item {len(rows)}, got {item_id}")
            entries: list[tuple[int, float]] = []
            if len(parts) > 1 and parts[1]:
                for chunk in parts[1].split(" "):
                    j, s = chunk.split(":")
                    entries.append((int(j), float(s)))
            rows.append(entries)
    width = min(len(r) for r in rows) if rows else 0
    max_width = max(len(r) for r in rows) if rows else 0
    if width != max_width:
        raise ValueError(f"{path}: ragged neighbour lists ({width} vs {max_width})")
    ids = np.asarray([[j for j, _ in r] for r in rows], dtype=np.int64).reshape(len(rows), width)
    sims = np.asarray([[s for _, s in r] for r in rows], dtype=np.float64).reshape(len(rows), width)
    return ItemItemGraph(k=width, neighbor_ids=ids, neighbor_sims=sims)
