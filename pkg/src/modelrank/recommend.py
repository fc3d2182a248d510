"""Inference-time services: cold-start top-K ranking, scale-matched pool
replacement, prior-head probing, and standardized-advantage analysis."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import numerics as nm
from .corpus import Corpus, DatasetMeta, EntityCatalog, ModelMeta, normalize_key, resolve_family_key, size_bucket
from .corpus import N_SIZE_BUCKETS
from .embedding import FeatureBuilder
from .errors import EmptyCandidates
from .scorer import prior_score, score_candidates
from .training import Checkpoint


@dataclass(frozen=True)
class PoolEntry:
    """A deployable model slot: key, inference scale (active parameters), availability tag."""

    model_key: str
    scale: int
    availability: str = ""

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"pool entry {self.model_key}: scale must be >= 1")


@dataclass
class Recommendation:
    model_key: str
    score: float
    z_hat: float


def recommend_top_k(checkpoint: Checkpoint, dataset_description: str, task_key: str,
                    metric_key: str, k: int, candidate_keys: list[str] | None = None,
                    cold_models: list[ModelMeta] | None = None) -> list[Recommendation]:
    """Rank candidates for a dataset known only by description, task, and metric.

    Candidates come from the checkpoint catalog (optionally filtered to
    ``candidate_keys``) plus any supplied cold-model metadata. The dataset is
    scored through the UNK identity row and its description embedding.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    models = list(checkpoint.catalog.models)
    if candidate_keys is not None:
        wanted = {normalize_key(key) for key in candidate_keys}
        models = [m for m in models if m.model_key in wanted]
    if cold_models:
        present = {m.model_key for m in models}
        models += [m for m in cold_models if m.model_key not in present]
    if not models:
        raise EmptyCandidates("no candidate models after filtering")

    cold_dataset = DatasetMeta(dataset_key="__query__", display_name="",
                               description=dataset_description)
    builder = FeatureBuilder(EntityCatalog(models, [cold_dataset]), checkpoint.vocab,
                             checkpoint.embedder, dtype=checkpoint.store.dtype,
                             n_name_buckets=checkpoint.model_config.n_name_buckets)
    scores, z_hats = score_candidates(
        checkpoint.store, builder, np.arange(len(models)), 0,
        checkpoint.vocab.task_index(task_key), checkpoint.vocab.metric_index(metric_key))
    order = sorted(range(len(models)), key=lambda i: (-scores[i], models[i].model_key))
    return [Recommendation(models[i].model_key, float(scores[i]), float(z_hats[i]))
            for i in order[:min(k, len(models))]]


@dataclass
class PoolReplacement:
    original: PoolEntry
    selected: PoolEntry
    kept_original: bool
    original_rank: int | None
    selected_rank: int | None


SCALE_CAP = 1.1


def replace_pool(checkpoint: Checkpoint, pool: list[PoolEntry], dataset_description: str,
                 task_key: str, metric_key: str, catalog: list[PoolEntry],
                 bucket_tolerance: int = 1) -> list[PoolReplacement]:
    """Swap each pool slot for the best-ranked unused catalog model of comparable scale.

    Slots are processed in descending original scale; a candidate qualifies if
    its size bucket is within ``bucket_tolerance`` of the original's and its
    scale is at most 1.1x the original's. A slot with no qualifying candidate
    keeps its original entry, flagged.
    """
    if not catalog:
        raise EmptyCandidates("catalog is empty")
    if not pool:
        raise EmptyCandidates("pool is empty")

    known = {m.model_key: m for m in checkpoint.catalog.models}
    cold = [ModelMeta(e.model_key, e.model_key, "", e.scale) for e in catalog
            if e.model_key not in known]
    ranked = recommend_top_k(checkpoint, dataset_description, task_key, metric_key,
                             k=len(catalog),
                             candidate_keys=[e.model_key for e in catalog],
                             cold_models=cold)
    rank_of = {rec.model_key: i + 1 for i, rec in enumerate(ranked)}
    by_key = {e.model_key: e for e in catalog}
    candidates = sorted(by_key.values(), key=lambda e: rank_of.get(e.model_key, len(rank_of) + 1))

    used: set[str] = set()
    results: list[PoolReplacement] = []
    for original in sorted(pool, key=lambda e: -e.scale):
        orig_bucket = size_bucket(original.scale)
        chosen = None
        for cand in candidates:
            if cand.model_key in used:
                continue
            if abs(size_bucket(cand.scale) - orig_bucket) > bucket_tolerance:
                continue
            if cand.scale > SCALE_CAP * original.scale:
                continue
            chosen = cand
            break
        if chosen is None:
            used.add(original.model_key)
            results.append(PoolReplacement(original, original, kept_original=True,
                                           original_rank=rank_of.get(original.model_key),
                                           selected_rank=None))
        else:
            used.add(chosen.model_key)
            results.append(PoolReplacement(original, chosen, kept_original=False,
                                           original_rank=rank_of.get(original.model_key),
                                           selected_rank=rank_of.get(chosen.model_key)))
    return results


@dataclass
class PriorProbeReport:
    """Standardized prior scores per size bucket and family, with trend statistics."""

    size_scores: list[float]              # all buckets, standardized over present ones
    present_buckets: list[int]
    family_scores: dict[str, float]       # catalog-present families, standardized
    size_spearman: float
    family_eta_squared: float
    degenerate: bool = False              # zero-variance probes were flattened to zeros
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "size_scores": self.size_scores,
            "present_buckets": self.present_buckets,
            "family_scores": self.family_scores,
            "size_spearman": self.size_spearman,
            "family_eta_squared": self.family_eta_squared,
            "degenerate": self.degenerate,
            "notes": self.notes,
        }, sort_keys=True, indent=2)


def _standardize(values: np.ndarray) -> tuple[np.ndarray, bool]:
    std = values.std()
    if std == 0.0 or values.size < 2:
        return np.zeros_like(values), True
    return (values - values.mean()) / std, False


def probe_prior(checkpoint: Checkpoint) -> PriorProbeReport:
    """Probe the prior head over size buckets and families, marginalizing the other factor.

    Mean embeddings and trend statistics use catalog-present buckets/families
    only; rows never touched by training stay at their random initialization.
    """
    store = checkpoint.store
    models = checkpoint.catalog.models
    buckets = np.array([size_bucket(m.param_count) for m in models], dtype=np.int64)
    fam_idx = np.array([checkpoint.vocab.family_index(resolve_family_key(m)) for m in models],
                       dtype=np.int64)
    present_buckets = sorted(set(buckets.tolist()))
    present_fams = sorted(set(fam_idx.tolist()))

    size_rows = store.size.data
    fam_rows = store.family.data
    mean_fam = fam_rows[present_fams].mean(axis=0)
    mean_size = size_rows[present_buckets].mean(axis=0)

    def phi(size_mat: np.ndarray, fam_mat: np.ndarray) -> np.ndarray:
        with nm.no_grad():
            out = prior_score(store,
                              nm.Tensor(size_mat.astype(store.dtype)),
                              nm.Tensor(fam_mat.astype(store.dtype)))
        return out.data[:, 0].astype(np.float64)

    all_bucket_scores = phi(size_rows, np.tile(mean_fam, (N_SIZE_BUCKETS, 1)))
    fam_raw = phi(np.tile(mean_size, (len(present_fams), 1)), fam_rows[present_fams])

    present_scores, size_degenerate = _standardize(all_bucket_scores[present_buckets])
    size_scores = np.zeros(N_SIZE_BUCKETS)
    std = all_bucket_scores[present_buckets].std()
    if not size_degenerate:
        size_scores = (all_bucket_scores - all_bucket_scores[present_buckets].mean()) / std
    fam_scores, fam_degenerate = _standardize(fam_raw)

    notes = []
    if size_degenerate or len(present_buckets) < 2:
        rho = 0.0
        notes.append("size probe degenerate: constant scores, spearman reported as 0")
    else:
        rho = float(stats.spearmanr(present_buckets, present_scores).statistic)

    # eta^2 over per-model prior scores grouped by family
    per_model = phi(size_rows[buckets], fam_rows[fam_idx])
    total_var = per_model.var()
    if total_var == 0.0:
        eta2 = 0.0
        notes.append("family probe degenerate: constant per-model prior scores")
    else:
        grand = per_model.mean()
        between = 0.0
        for f in present_fams:
            members = per_model[fam_idx == f]
            between += members.size * (members.mean() - grand) ** 2
        eta2 = float(between / (per_model.size * total_var))

    fam_names = {checkpoint.vocab.family_index(f): f for f in checkpoint.vocab.families}
    fam_names[0] = "unknown"
    return PriorProbeReport(
        size_scores=[float(s) for s in size_scores],
        present_buckets=[int(b) for b in present_buckets],
        family_scores={fam_names.get(f, str(f)): float(s)
                       for f, s in zip(present_fams, fam_scores)},
        size_spearman=rho,
        family_eta_squared=eta2,
        degenerate=size_degenerate or fam_degenerate,
        notes=notes,
    )


def standardized_advantage(corpus: Corpus, grouping: str = "size_bucket",
                           min_models: int = 5) -> dict:
    """Mean per-model z-bar by bin; bins with fewer than min_models members are dropped.

    A model's z-bar averages its within-group z over every group containing it,
    so a positive bin advantage means consistent outperformance.
    """
    if grouping not in ("size_bucket", "family"):
        raise ValueError(f"unknown grouping {grouping!r}")
    n_models = len(corpus.catalog.models)
    z_sum = np.zeros(n_models)
    z_count = np.zeros(n_models, dtype=np.int64)
    for group in corpus.groups.values():
        np.add.at(z_sum, group.model_indices, group.z_values)
        np.add.at(z_count, group.model_indices, 1)
    seen = z_count > 0
    z_bar = np.zeros(n_models)
    z_bar[seen] = z_sum[seen] / z_count[seen]

    bins: dict = {}
    for pos, meta in enumerate(corpus.catalog.models):
        if not seen[pos]:
            continue
        key = size_bucket(meta.param_count) if grouping == "size_bucket" \
            else (resolve_family_key(meta) or "unknown")
        bins.setdefault(key, []).append(z_bar[pos])
    return {key: {"advantage": float(np.mean(vals)), "n_models": len(vals)}
            for key, vals in sorted(bins.items(), key=lambda kv: str(kv[0]))
            if len(vals) >= min_models}
