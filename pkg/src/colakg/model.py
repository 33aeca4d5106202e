"""The forward model: adapters, fusion, neighbour attention, graph propagation.

Item and user ID embeddings are fused with adapted (frozen) semantic vectors,
item representations are augmented by an attention-weighted average of their
top-k semantic neighbours, and the result is propagated over the train-edge
bipartite graph LightGCN-style: symmetric-normalised weighted sums with the
final representation being the mean over all layers. Scores are dot products.

All arithmetic is float64. The composite :func:`forward_full` records every
intermediate needed for the hand-derived backward pass in the trainer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset

LEAKY_SLOPE = 0.2


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(pre: np.ndarray) -> np.ndarray:
    """Derivative of ELU evaluated at the pre-activation."""
    return np.where(pre > 0, 1.0, np.exp(np.minimum(pre, 0.0)))


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(pre: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(pre > 0, 1.0, slope)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


@dataclass(frozen=True)
class ModelDims:
    n_users: int
    n_items: int
    id_dim: int = 64
    sem_dim: int = 1024
    attn_dim: int = 64
    n_layers: int = 3


@dataclass
class AblationFlags:
    """Switches for the four reduced model variants."""

    no_item_semantic: bool = False
    no_user_semantic: bool = False
    no_neighbor_aug: bool = False
    no_second_order: bool = False  # handled upstream at prompt rendering

    def any_semantic_path(self) -> bool:
        return not (self.no_item_semantic and self.no_user_semantic and self.no_neighbor_aug)


PARAM_NAMES = ("user_id_emb", "item_id_emb", "item_adapter", "user_adapter", "attn_proj", "attn_vec")


@dataclass
class ModelState:
    """All trainable parameters, float64."""

    dims: ModelDims
    user_id_emb: np.ndarray
    item_id_emb: np.ndarray
    item_adapter: np.ndarray  # (id_dim, sem_dim)
    user_adapter: np.ndarray  # (id_dim, sem_dim)
    attn_proj: np.ndarray  # (attn_dim, sem_dim)
    attn_vec: np.ndarray  # (2 * attn_dim,)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelState":
        return ModelState(self.dims, *(getattr(self, n).copy() for n in PARAM_NAMES))


def init_model(dims: ModelDims, seed: int | np.random.Generator = 0) -> ModelState:
    """Normal(0, 0.1) embeddings, Glorot-scaled transforms; one fixed draw order."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def glorot(rows: int, cols: int) -> np.ndarray:
        scale = np.sqrt(2.0 / (rows + cols))
        return rng.normal(0.0, scale, size=(rows, cols))

    return ModelState(
        dims=dims,
        user_id_emb=rng.normal(0.0, 0.1, size=(dims.n_users, dims.id_dim)),
        item_id_emb=rng.normal(0.0, 0.1, size=(dims.n_items, dims.id_dim)),
        item_adapter=glorot(dims.id_dim, dims.sem_dim),
        user_adapter=glorot(dims.id_dim, dims.sem_dim),
        attn_proj=glorot(dims.attn_dim, dims.sem_dim),
        attn_vec=glorot(2 * dims.attn_dim, 1)[:, 0],
    )


def adapter_forward(sem_vec: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Project a semantic vector into the ID-embedding space: ELU(W s)."""
    return elu(weight @ np.asarray(sem_vec, dtype=np.float64))


def fuse(id_vec: np.ndarray, adapted_vec: np.ndarray) -> np.ndarray:
    """Mean-pool the two modalities."""
    return 0.5 * (np.asarray(id_vec, dtype=np.float64) + np.asarray(adapted_vec, dtype=np.float64))


def attention_logits(
    attn_proj: np.ndarray,
    attn_vec: np.ndarray,
    sem_items: np.ndarray,
    center: int,
    neighbor_ids: np.ndarray,
) -> np.ndarray:
    """Raw attention scores LeakyReLU(a . [P s_center || P s_neighbor])."""
    da = attn_proj.shape[0]
    projected = sem_items @ attn_proj.T
    pre = projected[center] @ attn_vec[:da] + projected[neighbor_ids] @ attn_vec[da:]
    return leaky_relu(pre)


def attention_weights(
    state: ModelState, sem_items: np.ndarray, center: int, neighbor_ids: np.ndarray
) -> np.ndarray:
    """Softmax-normalised neighbour weights for one item.

    Depends only on the frozen semantic vectors and the attention parameters,
    never on ID embeddings.
    """
    neighbor_ids = np.asarray(neighbor_ids, dtype=np.int64)
    if neighbor_ids.size == 0:
        return np.zeros(0, dtype=np.float64)
    logits = attention_logits(state.attn_proj, state.attn_vec, sem_items, center, neighbor_ids)
    return softmax(logits)


def augment_item(h_center: np.ndarray, neighbor_h: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """ELU(0.5 * (h + sum_j alpha_j h_j)); identity when there are no neighbours."""
    if alpha.size == 0:
        return np.asarray(h_center, dtype=np.float64)
    return elu(0.5 * (h_center + alpha @ neighbor_h))


def norm_adjacency(dataset: InteractionDataset) -> sp.csr_matrix:
    """Symmetric-normalised user-item adjacency built from train edges only."""
    users = dataset.train_edges[:, 0]
    items = dataset.train_edges[:, 1]
    du = np.bincount(users, minlength=dataset.n_users).astype(np.float64)
    dv = np.bincount(items, minlength=dataset.n_items).astype(np.float64)
    vals = 1.0 / np.sqrt(du[users] * dv[items])
    return sp.csr_matrix(
        (vals, (users, items)), shape=(dataset.n_users, dataset.n_items), dtype=np.float64
    )


def propagate_layers(
    adjacency: sp.csr_matrix, user0: np.ndarray, item0: np.ndarray, n_layers: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All propagation layers 0..L (users and items), no averaging."""
    users = [np.asarray(user0, dtype=np.float64)]
    items = [np.asarray(item0, dtype=np.float64)]
    for _ in range(n_layers):
        users.append(adjacency @ items[-1])
        items.append(adjacency.T @ users[-1])
    return users, items


def lightgcn_propagate(
    adjacency: sp.csr_matrix, user0: np.ndarray, item0: np.ndarray, n_layers: int
) -> tuple[np.ndarray, np.ndarray]:
    """Final representations: the mean of layers 0..L."""
    users, items = propagate_layers(adjacency, user0, item0, n_layers)
    inv = 1.0 / (n_layers + 1)
    return inv * sum(users), inv * sum(items)


def predict(user_vec: np.ndarray, item_vec: np.ndarray) -> float:
    return float(np.dot(user_vec, item_vec))


@dataclass
class ForwardTrace:
    """Every intermediate required to backpropagate the loss exactly."""

    flags: AblationFlags
    dropout_rate: float
    training: bool
    # adapters / fusion
    item_pre: np.ndarray | None = None  # pre-activation of the item adapter
    item_adapted: np.ndarray | None = None
    user_pre: np.ndarray | None = None
    user_adapted: np.ndarray | None = None
    h_item: np.ndarray | None = None  # fused item representation
    h_user: np.ndarray | None = None
    # attention / augmentation
    neighbor_ids: np.ndarray | None = None
    att_projected: np.ndarray | None = None  # semantic vectors through attn_proj
    att_pre: np.ndarray | None = None  # pre-LeakyReLU scores
    alpha: np.ndarray | None = None
    aug_pre: np.ndarray | None = None  # pre-ELU augmented representation
    h_item_aug: np.ndarray | None = None
    # dropout masks, already divided by the keep probability
    user_mask0: np.ndarray | None = None
    item_mask0: np.ndarray | None = None
    user_msg_masks: list[np.ndarray] = field(default_factory=list)
    item_msg_masks: list[np.ndarray] = field(default_factory=list)
    # propagation
    user_layers: list[np.ndarray] = field(default_factory=list)
    item_layers: list[np.ndarray] = field(default_factory=list)
    user_final: np.ndarray | None = None
    item_final: np.ndarray | None = None


def forward_full(
    state: ModelState,
    adjacency: sp.csr_matrix,
    sem_items: np.ndarray | None,
    sem_users: np.ndarray | None,
    neighbor_ids: np.ndarray | None,
    flags: AblationFlags | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ForwardTrace:
    """Full-graph forward pass producing final user/item representations.

    ``sem_items``/``sem_users`` are frozen float64 matrices; ``neighbor_ids``
    is the rectangular (n_items, k') neighbour array or None. Dropout (both
    the initial-embedding and per-layer message variety) applies only when
    ``training`` is true, with inverted scaling.
    """
    flags = flags or AblationFlags()
    dims = state.dims
    trace = ForwardTrace(flags=flags, dropout_rate=dropout_rate, training=training)
    use_dropout = training and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("dropout requires an rng")

    if flags.no_item_semantic:
        h_item = state.item_id_emb.copy()
    else:
        if sem_items is None:
            raise ValueError("item semantic matrix required unless the item path is ablated")
        trace.item_pre = sem_items @ state.item_adapter.T
        trace.item_adapted = elu(trace.item_pre)
        h_item = 0.5 * (state.item_id_emb + trace.item_adapted)
    trace.h_item = h_item

    if flags.no_user_semantic:
        h_user = state.user_id_emb.copy()
    else:
        if sem_users is None:
            raise ValueError("user semantic matrix required unless the user path is ablated")
        trace.user_pre = sem_users @ state.user_adapter.T
        trace.user_adapted = elu(trace.user_pre)
        h_user = 0.5 * (state.user_id_emb + trace.user_adapted)
    trace.h_user = h_user

    augment = (
        not flags.no_neighbor_aug
        and neighbor_ids is not None
        and neighbor_ids.shape[1] > 0
    )
    if augment:
        if sem_items is None:
            raise ValueError("item semantic matrix required for neighbour augmentation")
        da = dims.attn_dim
        projected = sem_items @ state.attn_proj.T
        self_score = projected @ state.attn_vec[:da]
        nbr_score = projected @ state.attn_vec[da:]
        trace.neighbor_ids = neighbor_ids
        trace.att_projected = projected
        trace.att_pre = self_score[:, None] + nbr_score[neighbor_ids]
        att_logit = leaky_relu(trace.att_pre)
        trace.alpha = softmax(att_logit, axis=1)
        agg = np.einsum("nk,nkd->nd", trace.alpha, h_item[neighbor_ids])
        trace.aug_pre = 0.5 * (h_item + agg)
        h_item_aug = elu(trace.aug_pre)
    else:
        h_item_aug = h_item
    trace.h_item_aug = h_item_aug

    keep = 1.0 - dropout_rate
    if use_dropout:
        trace.user_mask0 = (rng.random(h_user.shape) >= dropout_rate) / keep
        trace.item_mask0 = (rng.random(h_item_aug.shape) >= dropout_rate) / keep
        user_l = h_user * trace.user_mask0
        item_l = h_item_aug * trace.item_mask0
    else:
        user_l = h_user
        item_l = h_item_aug

    trace.user_layers = [user_l]
    trace.item_layers = [item_l]
    for _ in range(dims.n_layers):
        u_next = adjacency @ trace.item_layers[-1]
        v_next = adjacency.T @ trace.user_layers[-1]
        if use_dropout:
            umask = (rng.random(u_next.shape) >= dropout_rate) / keep
            vmask = (rng.random(v_next.shape) >= dropout_rate) / keep
            trace.user_msg_masks.append(umask)
            trace.item_msg_masks.append(vmask)
            u_next = u_next * umask
            v_next = v_next * vmask
        trace.user_layers.append(u_next)
        trace.item_layers.append(v_next)

    inv = 1.0 / (dims.n_layers + 1)
    trace.user_final = inv * sum(trace.user_layers)
    trace.item_final = inv * sum(trace.item_layers)
    return trace


_CHECKPOINT_MAGIC = b"CLKM"


def save_checkpoint(state: ModelState, path: str | Path) -> None:
    """Binary checkpoint: magic, shape header, then f32 tables in fixed order."""
    dims = state.dims
    with Path(path).open("wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<6I", dims.n_users, dims.n_items, dims.id_dim, dims.sem_dim, dims.attn_dim, dims.n_layers
            )
        )
        for name in PARAM_NAMES:
            fh.write(getattr(state, name).astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {_CHECKPOINT_MAGIC!r}")
    n_users, n_items, id_dim, sem_dim, attn_dim, n_layers = struct.unpack_from("<6I", raw, 4)
    dims = ModelDims(
        n_users=n_users,
        n_items=n_items,
        id_dim=id_dim,
        sem_dim=sem_dim,
        attn_dim=attn_dim,
        n_layers=n_layers,
    )
    shapes = {
        "user_id_emb": (n_users, id_dim),
        "item_id_emb": (n_items, id_dim),
        "item_adapter": (id_dim, sem_dim),
        "user_adapter": (id_dim, sem_dim),
        "attn_proj": (attn_dim, sem_dim),
        "attn_vec": (2 * attn_dim,),
    }
    offset = 4 + 24
    arrays = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count
    return ModelState(dims=dims, **arrays)


def quantized_to_storage(state: ModelState) -> ModelState:
    """The state as it will read back from a checkpoint (f32-rounded)."""
    out = state.copy()
    for name in PARAM_NAMES:
        setattr(out, name, getattr(out, name).astype(np.float32).astype(np.float64))
    return out
