"""Ranking-quality metrics and the group-level evaluation protocol.

Weighted Kendall tau uses additive hyperbolic rank weights (1/(r+1) for
zero-based ground-truth rank r), so mistakes near the top cost more. The @K
metrics skip groups with fewer than K candidates. Group aggregates weight tau
by 1/M so large candidate pools cannot dominate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import Corpus, EvaluationGroup
from .embedding import FeatureBuilder
from .errors import GroupTooSmall
from .scorer import score_batch

DEFAULT_KS = (1, 10, 30, 50)
SCORE_CHUNK = 16384


def weighted_kendall_tau(pred_scores, truth_ranks) -> float:
    """Top-weighted rank correlation in [-1, 1]; prediction ties count as zero agreement."""
    pred = np.asarray(pred_scores, dtype=np.float64)
    ranks = np.asarray(truth_ranks, dtype=np.int64)
    m = len(pred)
    if m < 2:
        raise GroupTooSmall("weighted tau needs at least 2 members")
    w = 1.0 / ranks.astype(np.float64)  # 1/(r+1) with r zero-based
    pair_w = w[:, None] + w[None, :]
    pred_sign = np.sign(pred[:, None] - pred[None, :])
    truth_sign = np.sign(ranks[None, :].astype(np.float64) - ranks[:, None].astype(np.float64))
    iu = np.triu_indices(m, k=1)
    agree = pred_sign[iu] * truth_sign[iu]
    num = float((pair_w[iu] * agree).sum())
    den = float(pair_w[iu].sum())
    return num / den


def prediction_order(pred_scores, member_keys) -> np.ndarray:
    """Positions sorted by descending score; exact ties broken by ascending key."""
    idx = sorted(range(len(pred_scores)), key=lambda i: (-pred_scores[i], member_keys[i]))
    return np.asarray(idx, dtype=np.int64)


def ndcg_at_k(pred_order, truth_ranks, k: int) -> float:
    """NDCG with linear rank relevance: best member 1, worst 0."""
    ranks = np.asarray(truth_ranks, dtype=np.float64)
    m = len(ranks)
    rel = (m - ranks) / (m - 1) if m > 1 else np.ones_like(ranks)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float((rel[np.asarray(pred_order)[:k]] * discounts).sum())
    ideal = np.sort(rel)[::-1]
    idcg = float((ideal[:k] * discounts).sum())
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def hit_at_k(pred_order, truth_ranks, k: int) -> int:
    """1 iff the ground-truth best member appears in the first k predictions."""
    ranks = np.asarray(truth_ranks)
    top = int(np.argmin(ranks))
    return int(top in set(np.asarray(pred_order)[:k].tolist()))


def recall_at_k(pred_order, truth_ranks, k: int) -> float:
    """|predicted top-k  intersect  true top-k| / k."""
    ranks = np.asarray(truth_ranks)
    true_top = set(np.argsort(ranks, kind="stable")[:k].tolist())
    pred_top = set(np.asarray(pred_order)[:k].tolist())
    return len(true_top & pred_top) / k


@dataclass
class RankingReport:
    """Per-group metrics plus 1/M-weighted and plain aggregates."""

    ks: list[int]
    per_group: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        payload = {"aggregates": self.aggregates, "ks": self.ks,
                   "notes": self.notes, "per_group": self.per_group}
        return json.dumps(payload, sort_keys=True, indent=2)

    def to_table(self) -> str:
        rows = [("metric", "value"), ("groups", str(len(self.per_group)))]
        for key in sorted(self.aggregates):
            value = self.aggregates[key]
            rows.append((key, f"{value:.4f}" if isinstance(value, float) else str(value)))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def score_corpus_groups(store, builder: FeatureBuilder, corpus: Corpus,
                        groups: list[EvaluationGroup] | None = None) -> dict:
    """Inference-mode scores for every group; returns key -> (s_tilde, z_hat) arrays."""
    groups = list(corpus.groups.values()) if groups is None else groups
    model_pos, dataset_pos, task_idx, metric_idx, slices = [], [], [], [], []
    total = 0
    for g in groups:
        n = g.size
        model_pos.append(g.model_indices)
        dataset_pos.append(np.full(n, builder.catalog.dataset_index[g.group_key[0]], dtype=np.int64))
        task_idx.append(np.full(n, builder.vocab.task_index(g.group_key[1]), dtype=np.int64))
        metric_idx.append(np.full(n, builder.vocab.metric_index(g.group_key[2]), dtype=np.int64))
        slices.append((g.group_key, total, total + n))
        total += n
    if total == 0:
        return {}
    model_pos = np.concatenate(model_pos)
    dataset_pos = np.concatenate(dataset_pos)
    task_idx = np.concatenate(task_idx)
    metric_idx = np.concatenate(metric_idx)

    s_all = np.empty(total, dtype=np.float64)
    z_all = np.empty(total, dtype=np.float64)
    with nm.no_grad():
        for start in range(0, total, SCORE_CHUNK):
            sl = slice(start, min(start + SCORE_CHUNK, total))
            batch = builder.rows(store, model_pos[sl], dataset_pos[sl], task_idx[sl], metric_idx[sl])
            s, z = score_batch(store, batch, training=False)
            s_all[sl] = s.data[:, 0]
            z_all[sl] = z.data[:, 0]
    return {key: (s_all[a:b], z_all[a:b]) for key, a, b in slices}


def evaluate(checkpoint, corpus: Corpus, ks=DEFAULT_KS) -> RankingReport:
    """Score every group of ``corpus`` with the checkpoint and aggregate metrics.

    ``checkpoint`` needs ``store``, ``vocab``, and ``embedder`` attributes;
    entities absent from the checkpoint vocabulary ride the UNK pathway.
    """
    ks = sorted(int(k) for k in ks)
    builder = FeatureBuilder(corpus.catalog, checkpoint.vocab, checkpoint.embedder,
                             dtype=checkpoint.store.dtype,
                             n_name_buckets=checkpoint.model_config.n_name_buckets)
    groups = [corpus.groups[k] for k in sorted(corpus.groups)]
    scored = score_corpus_groups(checkpoint.store, builder, corpus, groups)
    return report_from_scores(corpus, scored, ks)


def report_from_scores(corpus: Corpus, scored: dict, ks=DEFAULT_KS) -> RankingReport:
    """Build a RankingReport from precomputed per-group scores."""
    report = RankingReport(ks=list(ks))
    tau_num = tau_den = 0.0
    taus = []
    at_k_sums = {k: {"ndcg": 0.0, "hit": 0.0, "recall": 0.0} for k in ks}
    at_k_counts = {k: 0 for k in ks}

    for key in sorted(scored):
        group = corpus.groups[key]
        scores, _ = scored[key]
        member_keys = [corpus.catalog.models[i].model_key for i in group.model_indices]
        tau = weighted_kendall_tau(scores, group.ranks)
        order = prediction_order(scores, member_keys)
        entry = {"group": list(key), "m": int(group.size), "tau_w": tau}
        for k in ks:
            if group.size >= k:
                entry[f"ndcg@{k}"] = ndcg_at_k(order, group.ranks, k)
                entry[f"hit@{k}"] = hit_at_k(order, group.ranks, k)
                entry[f"recall@{k}"] = recall_at_k(order, group.ranks, k)
                at_k_sums[k]["ndcg"] += entry[f"ndcg@{k}"]
                at_k_sums[k]["hit"] += entry[f"hit@{k}"]
                at_k_sums[k]["recall"] += entry[f"recall@{k}"]
                at_k_counts[k] += 1
        report.per_group.append(entry)
        w = 1.0 / group.size
        tau_num += w * tau
        tau_den += w
        taus.append(tau)

    if taus:
        report.aggregates["tau_w_weighted"] = tau_num / tau_den
        report.aggregates["tau_w_mean"] = float(np.mean(taus))
    else:
        report.notes.append("no groups with >= 2 members")
    for k in ks:
        if at_k_counts[k] == 0:
            report.notes.append(f"no groups eligible for k={k}")
            continue
        n = at_k_counts[k]
        report.aggregates[f"ndcg@{k}"] = at_k_sums[k]["ndcg"] / n
        report.aggregates[f"hit@{k}"] = at_k_sums[k]["hit"] / n
        report.aggregates[f"recall@{k}"] = at_k_sums[k]["recall"] / n
        report.aggregates[f"eligible@{k}"] = n
    return report
