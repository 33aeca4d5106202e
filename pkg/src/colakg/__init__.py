"""Knowledge-graph aware recommendation with frozen semantic embeddings.

Pipeline stages: prepare interaction/KG data, render subgraph prompts, build
semantic embeddings through a pluggable provider, build the top-k item-item
graph, train the fused graph model with a pairwise ranking loss, evaluate
with the all-ranking protocol.
"""

from .data import (
    InteractionDataset,
    KnowledgeGraph,
    kcore_filter,
    load_interactions,
    load_kg,
    split_dataset,
)
from .embedding import (
    EmbeddingCache,
    MockProvider,
    RemoteProvider,
    SemanticEmbeddingTable,
    build_embedding_table,
    provider_call_count,
)
from .evaluate import MetricReport, evaluate, k_sweep, ndcg_at_k, recall_at_k
from .itemgraph import ItemItemGraph, cosine_similarity, top_k_neighbors
from .model import AblationFlags, ModelDims, ModelState, init_model, load_checkpoint, save_checkpoint
from .prompts import PromptDocument, build_all_prompts, render_item_prompt, render_user_prompt
from .trainer import TrainConfig, TrainingArtifacts, bpr_loss, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "EmbeddingCache",
    "InteractionDataset",
    "ItemItemGraph",
    "KnowledgeGraph",
    "MetricReport",
    "MockProvider",
    "ModelDims",
    "ModelState",
    "PromptDocument",
    "RemoteProvider",
    "SemanticEmbeddingTable",
    "TrainConfig",
    "TrainingArtifacts",
    "bpr_loss",
    "build_all_prompts",
    "build_embedding_table",
    "cosine_similarity",
    "evaluate",
    "init_model",
    "k_sweep",
    "kcore_filter",
    "load_checkpoint",
    "load_interactions",
    "load_kg",
    "ndcg_at_k",
    "provider_call_count",
    "recall_at_k",
    "render_item_prompt",
    "render_user_prompt",
    "save_checkpoint",
    "split_dataset",
    "top_k_neighbors",
    "train",
]
