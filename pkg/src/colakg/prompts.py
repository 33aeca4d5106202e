"""Item-centred subgraph extraction and prompt rendering.

An item's prompt carries its first-order triples verbatim plus one sentence
per first-order neighbour summarising a sampled handful of that neighbour's
own triples. A user's prompt concatenates the first-order serialisations of
every item in their training history.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import InteractionDataset, KnowledgeGraph, item_display_name

MISSING = "missing"

ITEM_INSTRUCTION = (
    "You are given facts about an item from a knowledge graph. Summarize the "
    "item, infer and fill in missing attributes, and describe what kind of "
    "user would like it, in one paragraph."
)
USER_INSTRUCTION = (
    "You are given the items a user interacted with and their knowledge-graph "
    "facts. Describe this user's preferences in one paragraph."
)


@dataclass
class ItemSubgraph:
    """First-order triples of an item plus sampled second-order triples.

    ``second_order`` pairs each first-order neighbour entity with the triples
    sampled from that neighbour's outgoing set, in the neighbour order they
    first appear in the sorted first-order list.
    """

    item_id: int
    first_order: list[tuple[int, int, int]]
    second_order: list[tuple[int, list[tuple[int, int, int]]]]


@dataclass
class PromptDocument:
    kind: str  # "item" or "user"
    subject_id: int
    system_instruction: str
    body: str


def extract_first_order(kg: KnowledgeGraph, item_id: int) -> list[tuple[int, int, int]]:
    """All triples with the item's entity as head, in (relation, tail) order."""
    eid = kg.item_to_entity.get(item_id)
    if eid is None:
        return []
    return [(eid, r, t) for r, t in kg.outgoing(eid)]


def sample_second_order(
    kg: KnowledgeGraph,
    entity_id: int,
    center_entity: int,
    m: int,
    rng: np.random.Generator,
) -> list[tuple[int, int, int]]:
    """Uniform sample (without replacement) of the neighbour's triples.

    Candidates are the triples headed by ``entity_id`` whose tail is not the
    central item's entity. All candidates are returned when there are at most
    ``m`` of them. The returned list is in sorted (relation, tail) order.
    """
    if m < 0:
        raise ValueError("sample size must be >= 0")
    candidates = [(entity_id, r, t) for r, t in kg.outgoing(entity_id) if t != center_entity]
    if len(candidates) <= m:
        return candidates
    picked = rng.choice(len(candidates), size=m, replace=False)
    return [candidates[i] for i in sorted(picked)]


def build_item_subgraph(
    kg: KnowledgeGraph, item_id: int, m: int, rng: np.random.Generator
) -> ItemSubgraph:
    """Assemble the item's ego network with ``m`` second-order samples per neighbour."""
    first = extract_first_order(kg, item_id)
    center = kg.item_to_entity.get(item_id, -1)
    neighbors: list[int] = []
    for _, _, t in first:
        if t not in neighbors:
            neighbors.append(t)
    second = [(e, sample_second_order(kg, e, center, m, rng)) for e in neighbors]
    return ItemSubgraph(item_id=item_id, first_order=first, second_order=second)


def _name(names: list[str], idx: int) -> str:
    text = names[idx].strip() if 0 <= idx < len(names) else ""
    return text if text else MISSING


def serialize_triple(kg: KnowledgeGraph, triple: tuple[int, int, int]) -> str:
    h, r, t = triple
    return f"({_name(kg.entity_names, h)}, {_name(kg.relation_names, r)}, {_name(kg.entity_names, t)})"


def first_order_text(kg: KnowledgeGraph, triples: list[tuple[int, int, int]], subject_name: str) -> str:
    """Triples joined by '; ', or the placeholder line when there are none."""
    if not triples:
        return f"({subject_name}, {MISSING}, {MISSING})"
    return "; ".join(serialize_triple(kg, t) for t in triples)


def render_item_prompt(
    subgraph: ItemSubgraph, kg: KnowledgeGraph, item_name: str
) -> PromptDocument:
    """Render the item comprehension prompt from its subgraph.

    The body starts with the first-order serialisation, followed by one
    sentence per first-order neighbour listing the sampled second-order
    tails. Neighbours whose sample came back empty contribute nothing.
    """
    lines = [first_order_text(kg, subgraph.first_order, item_name)]
    for entity_id, triples in subgraph.second_order:
        if not triples:
            continue
        relations: list[str] = []
        tails: list[str] = []
        for _, r, t in triples:
            r_name = _name(kg.relation_names, r)
            t_name = _name(kg.entity_names, t)
            if r_name not in relations:
                relations.append(r_name)
            if t_name not in tails:
                tails.append(t_name)
        sentence = (
            f"Other items connected to {_name(kg.entity_names, entity_id)} "
            f"via {'/'.join(relations)}: {', '.join(tails)}"
        )
        lines.append(sentence)
    return PromptDocument(
        kind="item",
        subject_id=subgraph.item_id,
        system_instruction=ITEM_INSTRUCTION,
        body="\n".join(lines),
    )


def render_user_prompt(
    user_id: int,
    dataset: InteractionDataset,
    kg: KnowledgeGraph,
    char_budget: int = 8000,
) -> PromptDocument:
    """Render the user preference prompt from their training items.

    One line per training item, in training-edge order: "name: first-order
    triples". Whole lines are dropped from the end to fit ``char_budget``;
    at least one (possibly clipped) line is always kept.
    """
    items = dataset.user_train_items_ordered[user_id]
    if items.size == 0:
        raise ValueError(f"user {user_id} has no training interactions")
    lines: list[str] = []
    for v in items:
        name = item_display_name(kg, int(v), dataset.item_tokens)
        body = first_order_text(kg, extract_first_order(kg, int(v)), name)
        lines.append(f"{name}: {body}")
    kept: list[str] = []
    used = 0
    for line in lines:
        cost = len(line) + (1 if kept else 0)
        if used + cost > char_budget:
            break
        kept.append(line)
        used += cost
    if not kept:
        kept = [lines[0][:char_budget]]
    return PromptDocument(
        kind="user",
        subject_id=user_id,
        system_instruction=USER_INSTRUCTION,
        body="\n".join(kept),
    )


def build_all_prompts(
    dataset: InteractionDataset,
    kg: KnowledgeGraph,
    m: int = 10,
    char_budget: int = 8000,
    seed: int = 0,
) -> tuple[dict[int, PromptDocument], dict[int, PromptDocument]]:
    """Render prompts for every item and every user.

    Second-order sampling uses an rng derived from (seed, item id), so each
    item's prompt is reproducible independently of rendering order.
    """
    item_prompts: dict[int, PromptDocument] = {}
    for v in range(dataset.n_items):
        rng = np.random.default_rng((seed, v))
        sub = build_item_subgraph(kg, v, m, rng)
        name = item_display_name(kg, v, dataset.item_tokens)
        item_prompts[v] = render_item_prompt(sub, kg, name)
    user_prompts: dict[int, PromptDocument] = {}
    for u in range(dataset.n_users):
        user_prompts[u] = render_user_prompt(u, dataset, kg, char_budget=char_budget)
    return item_prompts, user_prompts


def dump_prompts(prompts: list[PromptDocument], path: str | Path) -> None:
    """One JSON record per line: {kind, id, system, body}."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(
                json.dumps(
                    {"kind": p.kind, "id": p.subject_id, "system": p.system_instruction, "body": p.body},
                    sort_keys=True,
                )
                + "\n"
            )


def load_prompts(path: str | Path) -> list[PromptDocument]:
    out: list[PromptDocument] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                PromptDocument(
                    kind=rec["kind"],
                    subject_id=rec["id"],
                    system_instruction=rec["system"],
                    body=rec["body"],
                )
            )
    return out
