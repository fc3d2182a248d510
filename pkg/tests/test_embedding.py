import numpy as np
import pytest

from modelrank import embedding as emb
from modelrank import numerics as nm
from modelrank.corpus import DatasetMeta, EntityCatalog, ModelMeta
from modelrank.errors import ContractError, RemoteEmbedUnavailable, UnknownEntity
from modelrank.params import ModelConfig, ParameterStore


def fnv_reference(data: bytes) -> int:
    # independent restatement of FNV-1a 64 for cross-checking
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) % (1 << 64)
    return h


def test_fnv1a64_known_value():
    # published FNV-1a test vector for "a"
    assert emb.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert emb.fnv1a64(b"model-name") == fnv_reference(b"model-name")


def test_fnv1a64_seed_changes_hash():
    assert emb.fnv1a64(b"x", seed=1) != emb.fnv1a64(b"x", seed=2) != emb.fnv1a64(b"x")


def test_tokenize_name_examples():
    assert emb.name_tokens("Llama-3.1-8B") == ["llama", "3", "1", "8b"]
    assert emb.tokenize_name("") == []
    assert emb.name_tokens("QwenVL") == ["qwen", "vl"]
    idx = emb.tokenize_name("Llama-3.1-8B")
    assert len(idx) == 4
    assert all(0 <= i < emb.NAME_HASH_BUCKETS for i in idx)
    assert idx[0] == fnv_reference(b"llama") % emb.NAME_HASH_BUCKETS


def test_embed_name_mean_pooling():
    table = nm.Tensor(np.arange(20.0).reshape(5, 4), requires_grad=True)
    single = emb.embed_name([2], table)
    assert np.array_equal(single.data[0], table.data[2])
    dup = emb.embed_name([2, 2], table)
    assert np.array_equal(dup.data[0], table.data[2])
    two = emb.embed_name([1, 3], table)
    assert np.allclose(two.data[0], (table.data[1] + table.data[3]) / 2)
    empty = emb.embed_name([], table)
    assert np.array_equal(empty.data[0], np.zeros(4))


# ---------------------------------------------------------------------------
# hashed description embedder
# ---------------------------------------------------------------------------

def test_hashed_embedder_empty_text_is_zero():
    e = emb.HashedTextEmbedder(dim=128, seed=0)
    assert np.array_equal(e.embed(""), np.zeros(128, dtype=np.float32))


def test_hashed_embedder_deterministic_bitwise():
    text = "A vision benchmark for multimodal reasoning"
    a = emb.HashedTextEmbedder(dim=1536, seed=3).embed(text)
    b = emb.HashedTextEmbedder(dim=1536, seed=3).embed(text)
    assert a.tobytes() == b.tobytes()
    c = emb.HashedTextEmbedder(dim=1536, seed=4).embed(text)
    assert a.tobytes() != c.tobytes()


def test_hashed_embedder_unit_norm():
    e = emb.HashedTextEmbedder(dim=1536, seed=0)
    for text in ("one", "two words here", "a much longer description with many words"):
        assert np.linalg.norm(e.embed(text)) == pytest.approx(1.0, abs=1e-6)


def test_hashed_embedder_unrelated_texts_near_orthogonal():
    # cosine of 100 random pairs of unrelated sentences concentrates near 0 at
    # dim 1536 (a single bucket collision contributes ~1/n_features)
    rng = np.random.default_rng(0)
    e = emb.HashedTextEmbedder(dim=1536, seed=0)
    words = [f"word{i}" for i in range(800)]
    worst = 0.0
    for _ in range(100):
        pick = rng.choice(len(words), size=12, replace=False)
        va = e.embed(" ".join(words[i] for i in pick[:6]))
        vb = e.embed(" ".join(words[i] for i in pick[6:]))
        worst = max(worst, abs(float(va @ vb)))
    assert worst < 0.2


def test_hashed_embedder_bigrams_are_order_sensitive():
    e = emb.HashedTextEmbedder(dim=1536, seed=0)
    assert not np.array_equal(e.embed("alpha beta"), e.embed("beta alpha"))


# ---------------------------------------------------------------------------
# remote embedder (faked transport)
# ---------------------------------------------------------------------------

class FakeResponse:
    def __init__(self, vec):
        self._vec = vec

    def raise_for_status(self):
        pass

    def json(self):
        return {"embedding": list(self._vec)}


def test_remote_embedder_caches_and_falls_back(tmp_path):
    calls = []

    def fake_post(url, json=None, headers=None, timeout=None):
        calls.append(json["input"])
        vec = np.zeros(8)
        vec[0] = 2.0
        return FakeResponse(vec)

    e = emb.RemoteTextEmbedder(endpoint="http://unit.test", api_key="k", model="m",
                               cache_dir=tmp_path, dim=8, post_fn=fake_post)
    v1 = e.embed("hello")
    assert np.linalg.norm(v1) == pytest.approx(1.0)
    assert calls == ["hello"]
    v2 = e.embed("hello")  # served from cache, no second call
    assert calls == ["hello"]
    assert np.array_equal(v1, v2)

    def broken_post(*args, **kwargs):
        raise OSError("network down")

    e2 = emb.RemoteTextEmbedder(endpoint="http://unit.test", api_key="k", model="m",
                                cache_dir=tmp_path, dim=8, post_fn=broken_post)
    assert np.array_equal(e2.embed("hello"), v1)  # cache survives network failure
    with pytest.raises(RemoteEmbedUnavailable):
        e2.embed("never seen")


def test_remote_embedder_cache_files_are_little_endian_f32(tmp_path):
    def fake_post(url, json=None, headers=None, timeout=None):
        return FakeResponse(np.arange(4.0))

    e = emb.RemoteTextEmbedder(endpoint="x", api_key="k", cache_dir=tmp_path, dim=4,
                               post_fn=fake_post)
    vec = e.embed("text")
    files = list(tmp_path.rglob("*.f32"))
    assert len(files) == 1
    stored = np.frombuffer(files[0].read_bytes(), dtype="<f4")
    assert np.allclose(stored, vec)


# ---------------------------------------------------------------------------
# ID dropout
# ---------------------------------------------------------------------------

def test_id_dropout_limits():
    idx = np.arange(1, 11)
    assert np.array_equal(emb.apply_id_dropout(idx, 0.0, None, training=True), idx)
    assert np.array_equal(emb.apply_id_dropout(idx, 0.5, None, training=False), idx)
    rng = np.random.default_rng(0)
    assert np.array_equal(emb.apply_id_dropout(idx, 1.0, rng, training=True), np.zeros(10, dtype=int))


def test_id_dropout_frequency_binomial_bound():
    rng = np.random.default_rng(123)
    idx = np.ones(100_000, dtype=np.int64)
    dropped = emb.apply_id_dropout(idx, 0.1, rng, training=True)
    frac = float((dropped == 0).mean())
    assert 0.094 <= frac <= 0.106


def test_lookup_id_with_dropout_out_of_range():
    table = nm.Tensor(np.zeros((4, 3)), requires_grad=True)
    with pytest.raises(UnknownEntity):
        emb.lookup_id_with_dropout(7, table, 0.0, None, training=False)
    row = emb.lookup_id_with_dropout(2, table, 0.0, None, training=False)
    assert np.array_equal(row, np.zeros(3))


def test_id_dropout_bad_probability():
    with pytest.raises(ContractError):
        emb.apply_id_dropout(np.array([1]), 1.5, None, training=True)


# ---------------------------------------------------------------------------
# feature building
# ---------------------------------------------------------------------------

def build_setup(config):
    models = [ModelMeta("m_a", "FamA/ModelOne-7B", "a text model", 7 * 10 ** 9, "fama"),
              ModelMeta("m_b", "FamB/ModelTwo-1B", "a vision model", 10 ** 9, "famb")]
    datasets = [DatasetMeta("d_x", "DX", "a vision benchmark")]
    vocab = emb.Vocabulary(models=["m_a", "m_b"], datasets=["d_x"], tasks=["vision"],
                           metrics=["accuracy"], families=["fama", "famb"])
    store = ParameterStore(config, vocab, seed=0)
    builder = emb.FeatureBuilder(EntityCatalog(models, datasets), vocab,
                                 emb.HashedTextEmbedder(dim=config.d_desc, seed=0),
                                 n_name_buckets=config.n_name_buckets)
    return store, builder, vocab


def test_build_features_default_dims():
    config = ModelConfig()
    assert config.d_model == 2304
    assert config.d_dataset == 1792
    assert config.d_input == 4544
    store, builder, vocab = build_setup(config)
    batch = builder.rows(store, np.array([0, 1]), np.array([0, 0]),
                         np.array([1, 1]), np.array([1, 1]))
    widths = [(b.data if isinstance(b, nm.Tensor) else b).shape[1] for b in batch.blocks]
    assert widths == [256, 512, 1536, 256, 1536, 64, 64, 256, 64]
    assert batch.e_size.data.shape == (2, 64)
    assert batch.e_fam.data.shape == (2, 64)


def test_cold_dataset_uses_unk_id_row(tiny_model_config):
    store, builder, vocab = build_setup(tiny_model_config)
    cold = emb.FeatureBuilder(
        EntityCatalog(builder.catalog.models, [DatasetMeta("novel", "N", "novel benchmark")]),
        vocab, builder.embedder, n_name_buckets=tiny_model_config.n_name_buckets)
    batch = cold.rows(store, np.array([0]), np.array([0]), np.array([0]), np.array([0]))
    unk_row = store.dataset_id.data[0]
    assert np.array_equal(batch.blocks[3].data[0], unk_row)
    # description block reflects the cold text, not zeros
    assert np.linalg.norm(batch.blocks[4][0]) == pytest.approx(1.0, abs=1e-5)


def test_cold_model_size_bucket(tiny_model_config):
    store, builder, vocab = build_setup(tiny_model_config)
    assert builder.size_buckets[0] == 11  # 7e9 params
    assert builder.size_buckets[1] == 10  # 1e9 params


def test_inference_build_is_deterministic(tiny_model_config):
    store, builder, _ = build_setup(tiny_model_config)
    a = builder.rows(store, np.array([0, 1]), np.array([0, 0]), np.array([1, 1]), np.array([1, 1]))
    b = builder.rows(store, np.array([0, 1]), np.array([0, 0]), np.array([1, 1]), np.array([1, 1]))
    for ba, bb in zip(a.blocks, b.blocks):
        da = ba.data if isinstance(ba, nm.Tensor) else ba
        db = bb.data if isinstance(bb, nm.Tensor) else bb
        assert np.array_equal(da, db)


def test_description_vectors_norm_invariant(small_corpus, tiny_model_config):
    corpus, _ = small_corpus
    vocab = emb.Vocabulary.build(corpus)
    builder = emb.FeatureBuilder(corpus.catalog, vocab,
                                 emb.HashedTextEmbedder(dim=64, seed=0), n_name_buckets=64)
    norms = np.linalg.norm(builder.model_desc, axis=1)
    assert np.all((np.abs(norms - 1.0) < 1e-5) | (norms == 0.0))
