"""All-ranking evaluation: recall/NDCG, sparsity groups, k-sweep driver.

Every item a user has not interacted with (train edges, plus validation
edges at test time) is a candidate. Ranking is by score descending with ties
broken by ascending item id. Metrics average over users that have at least
one relevant item in the evaluated split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import InteractionDataset


def rank_candidates(scores: np.ndarray, exclude: np.ndarray) -> np.ndarray:
    """Candidate item ids sorted by score descending, id ascending on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(scores.shape[0], dtype=bool)
    if len(exclude):
        mask[np.asarray(exclude, dtype=np.int64)] = False
    candidates = np.nonzero(mask)[0]
    order = np.argsort(-scores[candidates], kind="stable")
    return candidates[order]


def recall_at_k(ranked: np.ndarray, relevant: set[int], k: int) -> float:
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    hits = sum(1 for item in ranked[:k] if int(item) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: np.ndarray, relevant: set[int], k: int) -> float:
    """Binary-gain NDCG with 1/log2(position + 1) discounts, positions from 1."""
    if not relevant:
        raise ValueError("relevant set must be nonempty")
    dcg = 0.0
    for position, item in enumerate(ranked[:k], start=1):
        if int(item) in relevant:
            dcg += 1.0 / np.log2(position + 1)
    ideal_hits = min(len(relevant), k)
    idcg = sum(1.0 / np.log2(p + 1) for p in range(1, ideal_hits + 1))
    return dcg / idcg


@dataclass
class GroupStats:
    label: str
    user_ids: list[int]
    means: dict[str, float]

    @property
    def user_count(self) -> int:
        return len(self.user_ids)


@dataclass
class MetricReport:
    ks: tuple[int, ...]
    means: dict[str, float]
    per_user: dict[int, dict[str, float]]
    groups: list[GroupStats]

    @property
    def n_evaluated(self) -> int:
        return len(self.per_user)


def _relevant_and_excluded(
    dataset: InteractionDataset, split: str
) -> tuple[dict[int, set[int]], dict[int, np.ndarray]]:
    relevant: dict[int, set[int]] = {}
    for u, v in dataset.split_for(split):
        relevant.setdefault(int(u), set()).add(int(v))
    excluded: dict[int, np.ndarray] = {}
    exclude_val = split == "test"
    for u in relevant:
        banned = dataset.user_items[u]
        if exclude_val and dataset.val_edges.shape[0]:
            val_items = dataset.val_edges[dataset.val_edges[:, 0] == u, 1]
            banned = np.union1d(banned, val_items)
        excluded[u] = banned
    return relevant, excluded


def evaluate_split(
    user_final: np.ndarray,
    item_final: np.ndarray,
    dataset: InteractionDataset,
    split: str = "test",
    ks: tuple[int, ...] = (10, 20),
) -> tuple[dict[str, float], dict[int, dict[str, float]]]:
    """Mean and per-user recall/NDCG over users with relevant items in ``split``."""
    relevant, excluded = _relevant_and_excluded(dataset, split)
    per_user: dict[int, dict[str, float]] = {}
    for u in sorted(relevant):
        scores = item_final @ user_final[u]
        ranked = rank_candidates(scores, excluded[u])
        row: dict[str, float] = {}
        for k in ks:
            row[f"recall@{k}"] = recall_at_k(ranked, relevant[u], k)
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, relevant[u], k)
        per_user[u] = row
    if per_user:
        keys = [f"{m}@{k}" for k in ks for m in ("recall", "ndcg")]
        means = {key: float(np.mean([row[key] for row in per_user.values()])) for key in keys}
    else:
        means = {}
    return means, per_user


def sparsity_groups(
    dataset: InteractionDataset, per_user: dict[int, dict[str, float]], n_groups: int = 4
) -> list[GroupStats]:
    """Quartiles of evaluated users by train-interaction count, least active first.

    Group sizes differ by at most one; ties on the count break by user id.
    """
    users = sorted(per_user, key=lambda u: (len(dataset.user_items[u]), u))
    chunks = np.array_split(np.asarray(users, dtype=np.int64), n_groups)
    groups: list[GroupStats] = []
    metric_keys = next(iter(per_user.values())).keys() if per_user else []
    for index, chunk in enumerate(chunks, start=1):
        ids = [int(u) for u in chunk]
        means = {
            key: float(np.mean([per_user[u][key] for u in ids])) if ids else float("nan")
            for key in metric_keys
        }
        groups.append(GroupStats(label=f"{index:02d}", user_ids=ids, means=means))
    return groups


def evaluate(
    user_final: np.ndarray,
    item_final: np.ndarray,
    dataset: InteractionDataset,
    ks: tuple[int, ...] = (10, 20),
    split: str = "test",
) -> MetricReport:
    """Full report: overall means, per-user table, sparsity-group breakdown."""
    means, per_user = evaluate_split(user_final, item_final, dataset, split=split, ks=ks)
    groups = sparsity_groups(dataset, per_user) if per_user else []
    return MetricReport(ks=tuple(ks), means=means, per_user=per_user, groups=groups)


def write_report(report: MetricReport, txt_path: str | Path, tsv_path: str | Path) -> None:
    """Human-readable summary plus a flat file for plotting."""
    with Path(txt_path).open("w", encoding="utf-8") as fh:
        fh.write(f"evaluated_users\t{report.n_evaluated}\n")
        for key in sorted(report.means):
            fh.write(f"{key}\t{report.means[key]:.6f}\n")
        for group in report.groups:
            fh.write(f"group {group.label}\tusers={group.user_count}")
            for key in sorted(group.means):
                fh.write(f"\t{key}={group.means[key]:.6f}")
            fh.write("\n")
    with Path(tsv_path).open("w", encoding="utf-8") as fh:
        fh.write("scope\tmetric\tvalue\n")
        for key in sorted(report.means):
            fh.write(f"overall\t{key}\t{report.means[key]:.6f}\n")
        for group in report.groups:
            for key in sorted(group.means):
                fh.write(f"group{group.label}\t{key}\t{group.means[key]:.6f}\n")


def k_sweep(
    dataset: InteractionDataset,
    table,
    k_values: list[int],
    dims,
    config,
    sem_users: np.ndarray | None = None,
) -> list[tuple[int, MetricReport]]:
    """Retrain per neighbour count k (shared seed) and evaluate on test.

    The embedding table is built once by the caller and reused; only the
    item-item graph is rebuilt per k. Rows come back sorted by k ascending.
    """
    from .itemgraph import top_k_neighbors
    from .model import forward_full, norm_adjacency
    from .trainer import TrainingArtifacts, train

    n_items = dataset.n_items
    sem_items = table.item_matrix(n_items)
    if sem_users is None:
        sem_users = table.user_matrix(dataset.n_users)
    adjacency = norm_adjacency(dataset)
    results: list[tuple[int, MetricReport]] = []
    for k in sorted(k_values):
        graph = top_k_neighbors(table, k)
        artifacts = TrainingArtifacts(
            adjacency=adjacency,
            sem_items=sem_items,
            sem_users=sem_users,
            neighbor_ids=graph.neighbor_ids,
        )
        result = train(dataset, artifacts, dims, config)
        trace = forward_full(
            result.state,
            adjacency,
            sem_items,
            sem_users,
            graph.neighbor_ids,
            flags=config.flags,
            training=False,
        )
        results.append((k, evaluate(trace.user_final, trace.item_final, dataset)))
    return results


def write_sweep(results: list[tuple[int, MetricReport]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        keys = sorted(results[0][1].means) if results else []
        fh.write("k\t" + "\t".join(keys) + "\n")
        for k, report in results:
            fh.write(f"{k}\t" + "\t".join(f"{report.means[key]:.6f}" for key in keys) + "\n")
