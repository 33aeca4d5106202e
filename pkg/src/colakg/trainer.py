"""Supervised training: pairwise ranking loss, manual backprop, Adam.

The semantic embedding tables stay frozen throughout; only the ID embeddings,
the two adapters, and the attention parameters receive gradients. The
backward pass is hand-derived reverse accumulation through the fixed forward
graph (fusion, attention softmax, graph propagation); a finite-difference
oracle in the test suite pins it down for every ablation variant.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .data import InteractionDataset
from .model import (
    AblationFlags,
    ForwardTrace,
    ModelDims,
    ModelState,
    PARAM_NAMES,
    elu_grad,
    forward_full,
    init_model,
    leaky_relu_grad,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Required artifacts absent for the configured model paths."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1024
    max_epochs: int = 200
    l2_coeff: float = 1e-4
    dropout_rate: float = 0.2
    seed: int = 0
    patience: int = 20
    eval_k: int = 20
    flags: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.l2_coeff < 0:
            raise ValueError("l2 coefficient must be >= 0")


@dataclass
class TrainingArtifacts:
    """Prebuilt stage-1 outputs the trainer consumes read-only."""

    adjacency: sp.csr_matrix
    sem_items: np.ndarray | None = None
    sem_users: np.ndarray | None = None
    neighbor_ids: np.ndarray | None = None


def check_artifacts(artifacts: TrainingArtifacts, flags: AblationFlags) -> None:
    need_item_sem = not flags.no_item_semantic or not flags.no_neighbor_aug
    if need_item_sem and artifacts.sem_items is None:
        raise ConfigurationError("item semantic embeddings required but not provided")
    if not flags.no_user_semantic and artifacts.sem_users is None:
        raise ConfigurationError("user semantic embeddings required but not provided")
    if not flags.no_neighbor_aug and artifacts.neighbor_ids is None:
        raise ConfigurationError("item neighbour graph required but not provided")


def sample_training_batch(
    dataset: InteractionDataset, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform positive edges, one rejection-sampled negative per positive.

    A user who has interacted with every item cannot yield a negative; such
    triples are dropped with a warning.
    """
    edges = dataset.train_edges
    if edges.shape[0] == 0:
        raise ValueError("no training edges to sample from")
    item_sets = dataset.user_item_sets()
    n_items = dataset.n_items
    rows = rng.integers(0, edges.shape[0], size=batch_size)
    users: list[int] = []
    pos: list[int] = []
    neg: list[int] = []
    for row in rows:
        u, v = int(edges[row, 0]), int(edges[row, 1])
        interacted = item_sets[u]
        if len(interacted) >= n_items:
            warnings.warn(f"user {u} interacted with every item; skipping triple")
            continue
        while True:
            candidate = int(rng.integers(0, n_items))
            if candidate not in interacted:
                break
        users.append(u)
        pos.append(v)
        neg.append(candidate)
    return (
        np.asarray(users, dtype=np.int64),
        np.asarray(pos, dtype=np.int64),
        np.asarray(neg, dtype=np.int64),
    )


def bpr_loss(
    pos_scores: np.ndarray,
    neg_scores: np.ndarray,
    reg_arrays: list[np.ndarray],
    l2_coeff: float,
) -> float:
    """Sum of -ln sigmoid(pos - neg) plus l2_coeff * sum of squared entries.

    The pairwise term uses log1p(exp(-x)) via logaddexp, so it is stable for
    large score gaps in either direction.
    """
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if pos_scores.shape != neg_scores.shape:
        raise ValueError("positive and negative score lists must have equal length")
    pair = float(np.sum(np.logaddexp(0.0, -(pos_scores - neg_scores))))
    reg = sum(float(np.sum(np.square(a))) for a in reg_arrays)
    return pair + l2_coeff * reg


def _zero_grads(state: ModelState) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(getattr(state, name)) for name in PARAM_NAMES}


def forward_backward(
    state: ModelState,
    artifacts: TrainingArtifacts,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    flags: AblationFlags | None = None,
    l2_coeff: float = 0.0,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> tuple[float, dict[str, np.ndarray], ForwardTrace]:
    """One full forward plus exact reverse accumulation of all gradients.

    Returns (loss, gradients keyed like the parameter dict, trace). The
    semantic matrices never appear in the gradient dict; they are inputs,
    not parameters.
    """
    flags = flags or AblationFlags()
    users, pos, neg = batch
    trace = forward_full(
        state,
        artifacts.adjacency,
        artifacts.sem_items,
        artifacts.sem_users,
        artifacts.neighbor_ids,
        flags=flags,
        dropout_rate=dropout_rate,
        rng=rng,
        training=training,
    )
    uf, vf = trace.user_final, trace.item_final
    pos_scores = np.einsum("bd,bd->b", uf[users], vf[pos])
    neg_scores = np.einsum("bd,bd->b", uf[users], vf[neg])
    reg_arrays = [
        state.user_id_emb[users],
        state.item_id_emb[pos],
        state.item_id_emb[neg],
        state.item_adapter,
        state.user_adapter,
        state.attn_proj,
        state.attn_vec,
    ]
    loss = bpr_loss(pos_scores, neg_scores, reg_arrays, l2_coeff)

    grads = _zero_grads(state)
    dims = state.dims
    # d loss / d (pos - neg score) = sigmoid(x) - 1
    g = expit(pos_scores - neg_scores) - 1.0
    d_uf = np.zeros_like(uf)
    d_vf = np.zeros_like(vf)
    np.add.at(d_uf, users, g[:, None] * (vf[pos] - vf[neg]))
    np.add.at(d_vf, pos, g[:, None] * uf[users])
    np.add.at(d_vf, neg, -g[:, None] * uf[users])

    # Through the layer average and the propagation recursion.
    inv = 1.0 / (dims.n_layers + 1)
    adjacency = artifacts.adjacency
    g_user = inv * d_uf
    g_item = inv * d_vf
    for layer in range(dims.n_layers - 1, -1, -1):
        up = g_user if not trace.user_msg_masks else g_user * trace.user_msg_masks[layer]
        vp = g_item if not trace.item_msg_masks else g_item * trace.item_msg_masks[layer]
        g_user = inv * d_uf + adjacency @ vp
        g_item = inv * d_vf + adjacency.T @ up
    d_h_user = g_user if trace.user_mask0 is None else g_user * trace.user_mask0
    d_h_item_aug = g_item if trace.item_mask0 is None else g_item * trace.item_mask0

    # Through the neighbour augmentation, when it ran.
    if trace.aug_pre is not None:
        nbr = trace.neighbor_ids
        alpha = trace.alpha
        dz = d_h_item_aug * elu_grad(trace.aug_pre)
        d_h_item = 0.5 * dz
        d_agg = 0.5 * dz
        nbr_h = trace.h_item[nbr]
        d_alpha = np.einsum("nd,nkd->nk", d_agg, nbr_h)
        np.add.at(d_h_item, nbr, alpha[:, :, None] * d_agg[:, None, :])
        d_logit = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        d_att_pre = d_logit * leaky_relu_grad(trace.att_pre)
        d_self = np.sum(d_att_pre, axis=1)
        d_nbr_score = np.zeros(dims.n_items)
        np.add.at(d_nbr_score, nbr, d_att_pre)
        da = dims.attn_dim
        a_self, a_nbr = state.attn_vec[:da], state.attn_vec[da:]
        projected = trace.att_projected
        d_projected = d_self[:, None] * a_self[None, :] + d_nbr_score[:, None] * a_nbr[None, :]
        grads["attn_vec"][:da] = projected.T @ d_self
        grads["attn_vec"][da:] = projected.T @ d_nbr_score
        grads["attn_proj"][:] = d_projected.T @ artifacts.sem_items
    else:
        d_h_item = d_h_item_aug

    # Through fusion and the adapters.
    if flags.no_item_semantic:
        grads["item_id_emb"][:] = d_h_item
    else:
        grads["item_id_emb"][:] = 0.5 * d_h_item
        d_item_pre = 0.5 * d_h_item * elu_grad(trace.item_pre)
        grads["item_adapter"][:] = d_item_pre.T @ artifacts.sem_items
    if flags.no_user_semantic:
        grads["user_id_emb"][:] = d_h_user
    else:
        grads["user_id_emb"][:] = 0.5 * d_h_user
        d_user_pre = 0.5 * d_h_user * elu_grad(trace.user_pre)
        grads["user_adapter"][:] = d_user_pre.T @ artifacts.sem_users

    # Regularisation term, matching the arrays counted in the loss.
    if l2_coeff != 0.0:
        two_l2 = 2.0 * l2_coeff
        np.add.at(grads["user_id_emb"], users, two_l2 * state.user_id_emb[users])
        np.add.at(grads["item_id_emb"], pos, two_l2 * state.item_id_emb[pos])
        np.add.at(grads["item_id_emb"], neg, two_l2 * state.item_id_emb[neg])
        grads["item_adapter"] += two_l2 * state.item_adapter
        grads["user_adapter"] += two_l2 * state.user_adapter
        grads["attn_proj"] += two_l2 * state.attn_proj
        grads["attn_vec"] += two_l2 * state.attn_vec
    return loss, grads, trace


@dataclass
class OptimizerState:
    """Adam moments mirroring the parameter tables."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(state: ModelState) -> OptimizerState:
    return OptimizerState(
        first={n: np.zeros_like(getattr(state, n)) for n in PARAM_NAMES},
        second={n: np.zeros_like(getattr(state, n)) for n in PARAM_NAMES},
    )


def adam_step(
    state: ModelState, opt: OptimizerState, grads: dict[str, np.ndarray], lr: float
) -> None:
    """Standard bias-corrected Adam update, in place."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for {name}; aborting epoch")
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for name in PARAM_NAMES:
        g = grads[name]
        m = opt.first[name]
        v = opt.second[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        getattr(state, name)[...] -= lr * update


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    best_epoch: int
    best_val_recall: float


def train(
    dataset: InteractionDataset,
    artifacts: TrainingArtifacts,
    dims: ModelDims,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Epoch loop with per-epoch validation recall and early stopping.

    Keeps (and optionally writes to ``out_dir/best.clkm``) the state with the
    best validation recall at ``config.eval_k``. Runs single-threaded and is
    bitwise deterministic for a fixed config and seed.
    """
    from .evaluate import evaluate_split

    check_artifacts(artifacts, config.flags)
    rng = np.random.default_rng(config.seed)
    state = init_model(dims, rng)
    opt = init_optimizer(state)
    n_edges = dataset.train_edges.shape[0]
    if n_edges == 0:
        raise ConfigurationError("training requires a nonempty train split")
    n_batches = max(1, (n_edges + config.batch_size - 1) // config.batch_size)
    has_val = dataset.val_edges.shape[0] > 0
    best_state = state.copy()
    best_recall = -np.inf
    best_epoch = 0
    bad_epochs = 0
    history: list[dict] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, config.max_epochs + 1):
        started = time.monotonic()
        loss_sum = 0.0
        pair_count = 0
        for _ in range(n_batches):
            batch = sample_training_batch(dataset, config.batch_size, rng)
            if batch[0].size == 0:
                continue
            loss, grads, _ = forward_backward(
                state,
                artifacts,
                batch,
                flags=config.flags,
                l2_coeff=config.l2_coeff,
                dropout_rate=config.dropout_rate,
                rng=rng,
                training=True,
            )
            adam_step(state, opt, grads, config.learning_rate)
            loss_sum += loss
            pair_count += batch[0].size
        trace = forward_full(
            state,
            artifacts.adjacency,
            artifacts.sem_items,
            artifacts.sem_users,
            artifacts.neighbor_ids,
            flags=config.flags,
            training=False,
        )
        if has_val:
            means, _ = evaluate_split(
                trace.user_final, trace.item_final, dataset, split="val", ks=(config.eval_k,)
            )
            val_recall = means[f"recall@{config.eval_k}"]
            val_ndcg = means[f"ndcg@{config.eval_k}"]
        else:
            val_recall = float("nan")
            val_ndcg = float("nan")
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / max(pair_count, 1),
                f"val_recall@{config.eval_k}": val_recall,
                f"val_ndcg@{config.eval_k}": val_ndcg,
                "elapsed_ms": int(1000 * (time.monotonic() - started)),
            }
        )
        if has_val and val_recall > best_recall:
            best_recall = val_recall
            best_state = state.copy()
            best_epoch = epoch
            bad_epochs = 0
            if out_path is not None:
                save_checkpoint(best_state, out_path / "best.clkm")
        elif has_val:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    if not has_val:
        best_state = state.copy()
        best_epoch = len(history)
        if out_path is not None:
            save_checkpoint(best_state, out_path / "best.clkm")
    return TrainResult(
        state=best_state,
        history=history,
        best_epoch=best_epoch,
        best_val_recall=float(best_recall) if has_val else float("nan"),
    )
