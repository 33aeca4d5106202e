"""Synthetic clustered dataset generator for experiments and tests.

Items fall into latent attribute clusters; each cluster has multi-word theme
and flavour attribute entities shared by its items, plus per-item noise
attributes. Users prefer one cluster and mostly interact inside it. The
cluster words end up in the rendered prompts, so hash embeddings of items in
the same cluster point roughly the same way while per-item noise keeps any
single embedding from being clean.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

THEMES = [
    "stellar voyage rescue saga",
    "haunted manor midnight whispers",
    "courtroom drama verdict justice",
    "slapstick comedy farce hijinks",
    "frontier outlaw dusty showdown",
]
FLAVORS = [
    "astronauts gravity orbit drift",
    "ghosts seance candlelight dread",
    "lawyers testimony gavel appeal",
    "pranks gags pratfalls laughter",
    "saloons revolvers tumbleweed duel",
]

_NOISE_WORDS = [
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "harbor",
    "indigo", "juniper", "krypton", "lagoon", "marble", "nectar", "obsidian",
    "pewter", "quartz", "russet", "sienna", "topaz", "umber", "velvet",
    "willow", "xenon", "yarrow", "zephyr",
]


def generate_clustered_dataset(
    out_dir: str | Path,
    n_users: int = 200,
    n_items: int = 100,
    n_clusters: int = 5,
    interactions_low: int = 8,
    interactions_high: int = 14,
    in_cluster_prob: float = 0.85,
    secondary_prob: float = 0.0,
    noise_attrs: int = 2,
    popularity_exponent: float = 0.0,
    seed: int = 7,
) -> dict[str, Path]:
    """Write interactions.tsv, triples.tsv, and item_map.tsv under ``out_dir``.

    Each user prefers one cluster (probability ``in_cluster_prob``); with
    ``secondary_prob`` they draw from a fixed personal secondary cluster,
    otherwise uniformly. ``popularity_exponent`` > 0 skews in-cluster item
    choice towards a Zipf head, leaving tail items with very few interactions.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if n_clusters > len(THEMES):
        raise ValueError(f"at most {len(THEMES)} clusters supported")
    cluster_of = np.arange(n_items) % n_clusters
    item_names = [f"Item {i:03d}" for i in range(n_items)]

    triples_path = out / "triples.tsv"
    with triples_path.open("w", encoding="utf-8") as fh:
        for i in range(n_items):
            c = int(cluster_of[i])
            fh.write(f"{item_names[i]}\tcategory\t{THEMES[c]}\n")
            fh.write(f"{item_names[i]}\tstyle\t{FLAVORS[c]}\n")
            for a in range(noise_attrs):
                w1 = _NOISE_WORDS[int(rng.integers(0, len(_NOISE_WORDS)))]
                w2 = _NOISE_WORDS[int(rng.integers(0, len(_NOISE_WORDS)))]
                fh.write(f"{item_names[i]}\ttrait\t{w1} {w2} mark{i:03d}n{a}\n")
        # Reverse edges give the themes outgoing triples, so second-order
        # sampling can surface cluster mates in the prompts.
        for c in range(n_clusters):
            members = np.nonzero(cluster_of == c)[0]
            for i in members:
                fh.write(f"{THEMES[c]}\tfeatures\t{item_names[int(i)]}\n")

    map_path = out / "item_map.tsv"
    with map_path.open("w", encoding="utf-8") as fh:
        for i in range(n_items):
            fh.write(f"i{i:03d}\t{item_names[i]}\n")

    inter_path = out / "interactions.tsv"
    cluster_items = [np.nonzero(cluster_of == c)[0] for c in range(n_clusters)]
    cluster_weights = []
    for c in range(n_clusters):
        ranks = np.arange(1, len(cluster_items[c]) + 1, dtype=np.float64)
        w = ranks**-popularity_exponent if popularity_exponent > 0 else np.ones_like(ranks)
        cluster_weights.append(w / w.sum())
    with inter_path.open("w", encoding="utf-8") as fh:
        for u in range(n_users):
            preferred = u % n_clusters
            secondary = (preferred + 1 + (u // n_clusters) % (n_clusters - 1)) % n_clusters
            target = int(rng.integers(interactions_low, interactions_high + 1))
            chosen: list[int] = []
            chosen_set: set[int] = set()
            while len(chosen) < target:
                draw = rng.random()
                if draw < in_cluster_prob:
                    c = preferred
                elif draw < in_cluster_prob + secondary_prob:
                    c = secondary
                else:
                    c = -1
                if c >= 0:
                    candidate = int(rng.choice(cluster_items[c], p=cluster_weights[c]))
                else:
                    candidate = int(rng.integers(0, n_items))
                if candidate not in chosen_set:
                    chosen_set.add(candidate)
                    chosen.append(candidate)
            for v in chosen:
                fh.write(f"u{u:03d}\ti{v:03d}\n")

    return {"interactions": inter_path, "triples": triples_path, "item_map": map_path}


if __name__ == "__main__":
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "demo_data"
    paths = generate_clustered_dataset(target)
    for name, path in paths.items():
        print(f"{name}: {path}")
