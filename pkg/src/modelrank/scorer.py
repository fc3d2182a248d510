"""Prior + residual scoring network.

A small MLP over (size, family) embeddings scores a model's intrinsic
competence; a wider MLP over the full joint feature vector scores its
context-specific fit through a pairwise head, with an auxiliary pointwise head
regressing the standardized within-group score. The two parts are summed and
divided by a learnable temperature (floored for stability).
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .embedding import FeatureBatch, FeatureBuilder
from .errors import EmptyCandidates, ShapeError
from .params import ParameterStore

INFERENCE_CHUNK = 8192


def prior_score(store: ParameterStore, e_size: nm.Tensor, e_fam: nm.Tensor) -> nm.Tensor:
    """Structural prior: depends only on the size-bucket and family embeddings."""
    if e_size.data.shape[1] != store.config.d_size or e_fam.data.shape[1] != store.config.d_family:
        raise ShapeError(f"prior inputs {e_size.data.shape} / {e_fam.data.shape}")
    h = nm.relu(nm.block_linear([e_size, e_fam], store.prior_w1, store.prior_b1))
    return nm.add(nm.matmul(h, store.prior_w2), store.prior_b2)


def residual_forward(store: ParameterStore, blocks: list, training: bool = False,
                     rng: np.random.Generator | None = None) -> tuple[nm.Tensor, nm.Tensor, nm.Tensor]:
    """Backbone over the joint features; returns (hidden, s_residual, z_hat)."""
    width = sum((b.data if isinstance(b, nm.Tensor) else b).shape[1] for b in blocks)
    if width != store.config.d_input:
        raise ShapeError(f"residual input width {width}, expected {store.config.d_input}")
    h1 = nm.relu(nm.block_linear(blocks, store.backbone_w1, store.backbone_b1))
    h1 = nm.dropout(h1, store.config.backbone_dropout, rng, training)
    h = nm.add(nm.matmul(h1, store.backbone_w2), store.backbone_b2)
    s_residual = nm.add(nm.matmul(h, store.w_pair), store.b_pair)
    z_hat = nm.add(nm.matmul(h, store.w_point), store.b_point)
    return h, s_residual, z_hat


def compose(s_residual: nm.Tensor, s_prior: nm.Tensor, tau: nm.Tensor,
            eps: float = 1e-3) -> nm.Tensor:
    """(s_residual + s_prior) / max(tau, eps); gradient reaches tau above the floor."""
    return nm.divide(nm.add(s_residual, s_prior), nm.maximum(tau, eps))


def score_batch(store: ParameterStore, batch: FeatureBatch, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[nm.Tensor, nm.Tensor]:
    """Composed scores and pointwise predictions for a feature batch, shape (B, 1) each."""
    s_prior = prior_score(store, batch.e_size, batch.e_fam)
    _, s_residual, z_hat = residual_forward(store, batch.blocks, training, rng)
    s_tilde = compose(s_residual, s_prior, store.tau, store.config.tau_floor)
    return s_tilde, z_hat


def score_candidates(store: ParameterStore, builder: FeatureBuilder,
                     model_pos: np.ndarray, dataset_pos: np.ndarray,
                     task_idx: int, metric_idx: int) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode scores for candidate rows; one (s_tilde, z_hat) pair per candidate.

    ``model_pos`` indexes the builder's catalog; ``dataset_pos`` is either one
    position broadcast to all rows or one per row.
    """
    model_pos = np.asarray(model_pos, dtype=np.int64)
    if model_pos.size == 0:
        raise EmptyCandidates("no candidates to score")
    dataset_pos = np.broadcast_to(np.asarray(dataset_pos, dtype=np.int64), model_pos.shape)
    s_out = np.empty(model_pos.size, dtype=np.float64)
    z_out = np.empty(model_pos.size, dtype=np.float64)
    with nm.no_grad():
        for start in range(0, model_pos.size, INFERENCE_CHUNK):
            sl = slice(start, min(start + INFERENCE_CHUNK, model_pos.size))
            n = sl.stop - sl.start
            batch = builder.rows(
                store, model_pos[sl], dataset_pos[sl],
                np.full(n, task_idx, dtype=np.int64),
                np.full(n, metric_idx, dtype=np.int64),
            )
            s, z = score_batch(store, batch, training=False)
            s_out[sl] = s.data[:, 0]
            z_out[sl] = z.data[:, 0]
    return s_out, z_out
