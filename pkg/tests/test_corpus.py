import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modelrank import corpus as cp
from modelrank.errors import GroupTooSmall, InvalidMeta, InvalidSpec


def rec(m, d="ds", t="task", mu="accuracy", v=0.5, tier="parsed"):
    return cp.InteractionRecord(m, d, t, mu, v, tier)


def jl(objs):
    return "\n".join(json.dumps(o) for o in objs)


# ---------------------------------------------------------------------------
# normalization and ingestion
# ---------------------------------------------------------------------------

def test_normalize_key():
    assert cp.normalize_key("  Meta LLaMA  3 ") == "meta_llama_3"
    assert cp.normalize_key("A\t B") == "a_b"


def test_ingest_tier_priority_keeps_leaderboard():
    lines = jl([
        {"model": "m", "dataset": "d", "task": "t", "metric": "acc", "value": 0.1, "tier": "parsed"},
        {"model": "m", "dataset": "d", "task": "t", "metric": "acc", "value": 0.2, "tier": "leaderboard"},
        {"model": "m", "dataset": "d", "task": "t", "metric": "acc", "value": 0.3, "tier": "structured"},
    ])
    corpus = cp.ingest(lines)
    assert corpus.n_records == 1
    assert corpus.records[0].source_tier == "leaderboard"
    assert corpus.records[0].value == 0.2


def test_deduplicate_last_wins_within_tier():
    records = [rec("m", v=0.5), rec("m", v=0.6)]
    kept = cp.deduplicate(records)
    assert len(kept) == 1 and kept[0].value == 0.6


def test_deduplicate_tier_beats_recency():
    records = [rec("m", v=0.9, tier="parsed"), rec("m", v=0.6, tier="leaderboard"),
               rec("m", v=0.7, tier="parsed")]
    kept = cp.deduplicate(records)
    assert len(kept) == 1 and kept[0].value == 0.6


def test_deduplicate_disjoint_keys_all_kept():
    records = [rec("a"), rec("b"), rec("a", d="other")]
    assert len(cp.deduplicate(records)) == 3


def test_ingest_empty_stream():
    corpus = cp.ingest("")
    assert corpus.n_records == 0 and corpus.n_groups == 0


def test_ingest_recovers_from_malformed_lines():
    lines = "\n".join([
        json.dumps({"model": "a", "dataset": "d", "task": "t", "metric": "acc", "value": 0.5}),
        "{not json",
        json.dumps({"model": "b", "dataset": "d", "task": "t", "metric": "acc"}),  # missing value
        json.dumps({"model": "c", "dataset": "d", "task": "t", "metric": "acc", "value": "inf"}),
        json.dumps({"model": "e", "dataset": "d", "task": "t", "metric": "acc", "value": 0.7}),
    ])
    corpus = cp.ingest(lines)
    assert corpus.n_records == 2
    bad_lines = [ln for _, ln, _ in corpus.report.line_errors]
    assert bad_lines == [2, 3, 4]


def test_ingest_stubs_unknown_entities():
    records = jl([{"model": "known", "dataset": "d1", "task": "t", "metric": "acc", "value": 1.0},
                  {"model": "ghost", "dataset": "d2", "task": "t", "metric": "acc", "value": 2.0}])
    models = jl([{"key": "known", "name": "Known", "description": "desc", "params": 100}])
    datasets = jl([{"key": "d1", "name": "D1", "description": ""}])
    corpus = cp.ingest(records, models, datasets)
    assert corpus.report.stubbed_models == 1
    assert corpus.report.stubbed_datasets == 1
    ghost = corpus.catalog.models[corpus.catalog.model_index["ghost"]]
    assert ghost.description == "" and ghost.param_count is None


def test_ingest_param_conflict_keeps_first():
    models = jl([{"key": "m", "name": "M", "description": "", "params": 10},
                 {"key": "m", "name": "M2", "description": "", "params": 20}])
    corpus = cp.ingest("", models, "")
    assert corpus.catalog.models[0].param_count == 10
    assert any("conflict" in c for c in corpus.report.meta_conflicts)


def test_ingest_idempotent_roundtrip(small_corpus):
    corpus, _ = small_corpus
    records, models, datasets = corpus.export_jsonl()
    again = cp.ingest(records, models, datasets, corpus.registry)
    assert corpus.same_contents(again)


def test_corpus_json_roundtrip(small_corpus):
    corpus, _ = small_corpus
    text = corpus.to_json()
    again = cp.Corpus.from_json(text)
    assert corpus.same_contents(again)
    assert again.to_json() == text


def test_ingest_streaming_scale_smoke():
    lines = (json.dumps({"model": f"m{i % 500}", "dataset": f"d{i % 37}", "task": "t",
                         "metric": "acc", "value": float(i % 11)})
             for i in range(20000))
    corpus = cp.ingest(lines)
    assert corpus.n_records == 500 * 37  # duplicates deduplicated on the fly


# ---------------------------------------------------------------------------
# orientation and z-scoring
# ---------------------------------------------------------------------------

def make_group(values, metric="accuracy", keys=None):
    keys = keys or [f"m{i}" for i in range(len(values))]
    records = [rec(k, mu=metric, v=v) for k, v in zip(keys, values)]
    catalog = cp.EntityCatalog([cp.ModelMeta(k, k) for k in sorted(keys)], [cp.DatasetMeta("ds", "ds")])
    return cp.orient_and_zscore(records, cp.MetricRegistry(), catalog), catalog


def test_zscore_two_point_symmetric():
    group, catalog = make_group([0.2, 0.8])
    # stored best first: 0.8 then 0.2
    assert np.allclose(group.z_values, [1.0, -1.0])
    assert group.raw_values.tolist() == [0.8, 0.2]
    assert group.ranks.tolist() == [1, 2]


def test_zscore_zero_variance_ranks_by_model_key():
    group, catalog = make_group([10.0, 10.0, 10.0], keys=["c", "a", "b"])
    assert np.array_equal(group.z_values, np.zeros(3))
    ordered_keys = [catalog.models[i].model_key for i in group.model_indices]
    assert ordered_keys == ["a", "b", "c"]


def test_zscore_lower_better_wer():
    group, catalog = make_group([5.0, 20.0], metric="wer")
    best_key = catalog.models[group.model_indices[0]].model_key
    assert best_key == "m0"  # wer 5.0 wins
    assert group.z_values[0] == pytest.approx(1.0)
    assert group.orientation == "lower_better"


def test_group_too_small():
    records = [rec("only")]
    catalog = cp.EntityCatalog([cp.ModelMeta("only", "only")], [cp.DatasetMeta("ds", "ds")])
    with pytest.raises(GroupTooSmall):
        cp.orient_and_zscore(records, cp.MetricRegistry(), catalog)


def test_z_mean_zero_std_one_before_clip(small_corpus):
    corpus, _ = small_corpus
    for group in corpus.groups.values():
        if np.unique(group.raw_values).size > 1 and np.abs(group.z_values).max() < 3.0:
            assert abs(group.z_values.mean()) < 1e-6
            assert abs(group.z_values.std() - 1.0) < 1e-6
        assert np.all(np.abs(group.z_values) <= 3.0)
        assert np.array_equal(np.sort(group.ranks), np.arange(1, group.size + 1))


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.integers(-10000, 10000), min_size=2, max_size=12, unique=True),
       a=st.floats(0.1, 50), b=st.floats(-100, 100))
def test_zscore_affine_invariance(values, a, b):
    values = [v / 100.0 for v in values]  # well-spaced floats, exact in binary up to rounding
    g1, _ = make_group(values)
    g2, _ = make_group([a * v + b for v in values])
    assert np.allclose(g1.z_values, g2.z_values, atol=1e-9)


def test_metric_registry_config_parse():
    registry = cp.MetricRegistry.from_config('lower_is_better = ["wer", "chrf_err"]\n')
    assert registry.orientation("test_wer") == "lower_better"
    assert registry.orientation("accuracy") == "higher_better"
    assert registry.orientation("chrf_err_v2") == "lower_better"


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def test_split_mask_entries_partitions_records(small_corpus):
    corpus, _ = small_corpus
    splits = cp.split(corpus, cp.SplitSpec(mode="mask_entries", fraction=0.2, seed=5))
    train_keys = splits["train"].record_keys()
    val_keys = splits["val"].record_keys()
    test_keys = splits["test"].record_keys()
    assert train_keys | val_keys | test_keys == corpus.record_keys()
    assert not (train_keys & test_keys) and not (train_keys & val_keys) and not (val_keys & test_keys)
    # model-disjoint validation
    train_models = {r.model_key for r in splits["train"].records}
    val_models = {r.model_key for r in splits["val"].records}
    assert not (train_models & val_models)


def test_split_deterministic(small_corpus):
    corpus, _ = small_corpus
    spec = cp.SplitSpec(mode="mask_entries", fraction=0.3, seed=9)
    a = cp.split(corpus, spec)
    b = cp.split(corpus, cp.SplitSpec(mode="mask_entries", fraction=0.3, seed=9))
    for name in ("train", "val", "test"):
        assert a[name].record_keys() == b[name].record_keys()


def test_split_holdout_datasets_full_fraction(small_corpus):
    corpus, _ = small_corpus
    splits = cp.split(corpus, cp.SplitSpec(mode="holdout_datasets", fraction=1.0, seed=0))
    assert splits["train"].n_records == 0
    assert splits["test"].record_keys() == corpus.record_keys()


def test_split_holdout_models_removes_all_their_records(small_corpus):
    corpus, _ = small_corpus
    splits = cp.split(corpus, cp.SplitSpec(mode="holdout_models", fraction=0.1, seed=2))
    held = {r.model_key for r in splits["test"].records}
    assert held
    for r in splits["train"].records + splits["val"].records:
        assert r.model_key not in held


def test_split_explicit_holdout_keys(small_corpus):
    corpus, _ = small_corpus
    keys = [corpus.catalog.datasets[0].dataset_key, corpus.catalog.datasets[3].dataset_key]
    splits = cp.split(corpus, cp.SplitSpec(mode="holdout_datasets", holdout_keys=keys, seed=0))
    test_ds = {r.dataset_key for r in splits["test"].records}
    assert test_ds == set(keys)


def test_split_invalid_specs(small_corpus):
    corpus, _ = small_corpus
    with pytest.raises(InvalidSpec):
        cp.split(corpus, cp.SplitSpec(mode="mask_entries", fraction=0.0, seed=0))
    with pytest.raises(InvalidSpec):
        cp.split(corpus, cp.SplitSpec(mode="mask_entries", fraction=1.5, seed=0))
    with pytest.raises(InvalidSpec):
        cp.split(corpus, cp.SplitSpec(mode="unknown", fraction=0.5, seed=0))
    with pytest.raises(InvalidSpec):
        cp.split(corpus, cp.SplitSpec(mode="mask_entries", fraction=0.5, holdout_keys=["x"], seed=0))
    with pytest.raises(InvalidSpec):
        cp.split(corpus, cp.SplitSpec(mode="mask_entries", seed=0))


# ---------------------------------------------------------------------------
# structural attributes
# ---------------------------------------------------------------------------

def test_size_bucket_examples():
    assert cp.size_bucket(None) == 20
    assert cp.size_bucket(7 * 10 ** 9) == 11
    assert cp.size_bucket(10 ** 4) == 0
    assert cp.size_bucket(10 ** 15) == 19
    with pytest.raises(InvalidMeta):
        cp.size_bucket(0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10 ** 15), st.integers(1, 10 ** 15))
def test_size_bucket_monotone(a, b):
    lo, hi = sorted((a, b))
    assert cp.size_bucket(lo) <= cp.size_bucket(hi)


def test_resolve_family_examples():
    assert cp.resolve_family_key(cp.ModelMeta("k", "x", family_key="LLaMA")) == "llama"
    assert cp.resolve_family_key(cp.ModelMeta("k", "meta-llama/Llama-3.1-8B")) == "llama"
    assert cp.resolve_family_key(cp.ModelMeta("k", "")) is None
    assert cp.resolve_family_key(cp.ModelMeta("k", "123-456")) is None
