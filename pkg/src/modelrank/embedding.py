"""Multi-view entity features: hashed name tokens, frozen description vectors,
learned ID/structural embeddings, and ID dropout for cold-start training.

A model's feature vector concatenates its learned ID row, the mean of its
hashed name-token rows, and a frozen description embedding; a dataset's
concatenates its ID row and description embedding. Size-bucket, family, task,
and metric embeddings ride alongside.
"""

from __future__ import annotations

import hashlib
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import DatasetMeta, EntityCatalog, ModelMeta, normalize_key, resolve_family_key, size_bucket
from .errors import ContractError, RemoteEmbedUnavailable, UnknownEntity

NAME_HASH_BUCKETS = 32768

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_CAMEL_RE = re.compile(r"(?<=[a-z])(?=[A-Z])")
_SPLIT_RE = re.compile(r"[^0-9a-zA-Z]+")
_WORD_RE = re.compile(r"[a-z0-9]+")


def fnv1a64(data: bytes, seed: int = 0) -> int:
    """64-bit FNV-1a; a nonzero seed is hashed in (little-endian) before the data."""
    h = _FNV_OFFSET
    if seed:
        for byte in int(seed & _MASK64).to_bytes(8, "little"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def name_tokens(display_name: str) -> list[str]:
    """Lowercase name tokens, split on non-alphanumerics and camel-case boundaries."""
    if not display_name:
        return []
    spaced = _CAMEL_RE.sub(" ", display_name)
    return [t.lower() for t in _SPLIT_RE.split(spaced) if t]


def tokenize_name(display_name: str, buckets: int = NAME_HASH_BUCKETS) -> list[int]:
    """Split a model name into lowercase tokens and hash each into the bucket space.

    Boundaries: non-alphanumeric characters and lowercase-to-uppercase camel
    transitions. Empty name gives an empty list.
    """
    return [fnv1a64(t.encode("utf-8")) % buckets for t in name_tokens(display_name)]


def embed_name(token_indices, table: nm.Tensor) -> nm.Tensor:
    """Mean of the token rows; empty token list gives the zero vector."""
    flat = np.asarray(token_indices, dtype=np.int64)
    offsets = np.array([0, len(flat)], dtype=np.int64)
    return nm.bag_mean(table, flat, offsets)


# ---------------------------------------------------------------------------
# description embedders
# ---------------------------------------------------------------------------

DESC_DIM = 1536


class HashedTextEmbedder:
    """Deterministic signed feature hashing of word unigrams and bigrams.

    A hermetic stand-in for a pretrained text encoder: same text and seed give
    a bitwise-identical unit vector. Empty text gives the zero vector.
    """

    kind = "hashed_fallback"

    def __init__(self, dim: int = DESC_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._bucket_seed = (seed * 0x9E3779B97F4A7C15 + 0x0123456789ABCDEF) & _MASK64 | 1
        self._sign_seed = (seed * 0xC2B2AE3D27D4EB4F + 0xFEDCBA9876543210) & _MASK64 | 1
        self._feature_cache: dict[bytes, tuple[int, float]] = {}
        self._text_cache: dict[str, np.ndarray] = {}

    def _feature(self, feat: bytes) -> tuple[int, float]:
        hit = self._feature_cache.get(feat)
        if hit is None:
            bucket = fnv1a64(feat, self._bucket_seed) % self.dim
            sign = 1.0 if fnv1a64(feat, self._sign_seed) & 1 else -1.0
            hit = (bucket, sign)
            self._feature_cache[feat] = hit
        return hit

    def embed(self, text: str) -> np.ndarray:
        cached = self._text_cache.get(text)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim, dtype=np.float32)
        words = _WORD_RE.findall(text.lower())
        feats = [w.encode("utf-8") for w in words]
        feats += [f"{a}\x00{b}".encode("utf-8") for a, b in zip(words, words[1:])]
        for feat in feats:
            bucket, sign = self._feature(feat)
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec /= norm
        self._text_cache[text] = vec
        return vec

    def embed_many(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = self.embed(text)
        return out


class RemoteTextEmbedder:
    """Embeds text via an HTTP endpoint with an on-disk vector cache.

    Request: POST {"input": text, "model": model} with a bearer token; response
    must be JSON with an "embedding" list. Cached vectors are content-addressed
    files of little-endian float32. The cache is consulted first, so repeat
    queries never touch the network.
    """

    kind = "remote"

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 model: str = "text-embedding", cache_dir: str | Path = ".embed_cache",
                 dim: int = DESC_DIM, post_fn=None, timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get("EMBED_API_URL", "")
        self.api_key = api_key or os.environ.get("EMBED_API_KEY", "")
        self.model = model
        self.cache_dir = Path(cache_dir)
        self.dim = dim
        self.timeout = timeout
        if post_fn is None:
            import requests

            post_fn = requests.post
        self._post = post_fn

    def _cache_path(self, text: str) -> Path:
        digest = hashlib.sha256(f"{self.model}\x00{text}".encode("utf-8")).hexdigest()
        return self.cache_dir / digest[:2] / f"{digest}.f32"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            return np.zeros(self.dim, dtype=np.float32)
        path = self._cache_path(text)
        if path.exists():
            vec = np.fromfile(path, dtype="<f4")
            if vec.size == self.dim:
                return vec.astype(np.float32)
        try:
            resp = self._post(
                self.endpoint,
                json={"input": text, "model": self.model},
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vec = np.asarray(resp.json()["embedding"], dtype=np.float32)
        except Exception as exc:
            raise RemoteEmbedUnavailable(f"remote embed failed and no cached vector: {exc}") from exc
        if vec.size != self.dim:
            raise RemoteEmbedUnavailable(f"endpoint returned dim {vec.size}, expected {self.dim}")
        norm = float(np.linalg.norm(vec))
        if norm > 0.0:
            vec = vec / norm
        self._write_cache(path, vec)
        return vec

    def _write_cache(self, path: Path, vec: np.ndarray) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(vec.astype("<f4").tobytes())
            os.replace(tmp, path)  # atomic: concurrent readers never see partial files
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def embed_many(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            out[i] = self.embed(text)
        return out


# ---------------------------------------------------------------------------
# ID dropout
# ---------------------------------------------------------------------------


def apply_id_dropout(indices: np.ndarray, p: float, rng: np.random.Generator | None,
                     training: bool) -> np.ndarray:
    """Replace each index with the shared UNK row (index 0) with probability p.

    Inference is never randomized: callers map unseen entities to 0 themselves.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"dropout probability {p} outside [0, 1]")
    if not training or p == 0.0:
        return indices
    if rng is None:
        raise ContractError("training-mode ID dropout needs an rng")
    mask = rng.random(len(indices)) < p
    return np.where(mask, 0, indices)


def lookup_id_with_dropout(index: int, table: nm.Tensor, p: float,
                           rng: np.random.Generator | None, training: bool) -> np.ndarray:
    """Single-row convenience wrapper around apply_id_dropout."""
    if not 0 <= index < table.data.shape[0]:
        raise UnknownEntity(f"entity index {index} out of range (table has {table.data.shape[0]} rows)")
    idx = apply_id_dropout(np.array([index]), p, rng, training)
    return table.data[int(idx[0])]


# ---------------------------------------------------------------------------
# vocabulary and feature building
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    """Key-to-row maps for every learned table; row 0 is reserved for UNK/unknown."""

    models: list[str]
    datasets: list[str]
    tasks: list[str]
    metrics: list[str]
    families: list[str]

    def __post_init__(self):
        self._model_idx = {k: i + 1 for i, k in enumerate(self.models)}
        self._dataset_idx = {k: i + 1 for i, k in enumerate(self.datasets)}
        self._task_idx = {k: i + 1 for i, k in enumerate(self.tasks)}
        self._metric_idx = {k: i + 1 for i, k in enumerate(self.metrics)}
        self._family_idx = {k: i + 1 for i, k in enumerate(self.families)}

    @classmethod
    def build(cls, corpus) -> "Vocabulary":
        families = sorted({f for f in (resolve_family_key(m) for m in corpus.catalog.models) if f})
        return cls(
            models=[m.model_key for m in corpus.catalog.models],
            datasets=[d.dataset_key for d in corpus.catalog.datasets],
            tasks=corpus.task_keys(),
            metrics=corpus.metric_keys(),
            families=families,
        )

    def model_index(self, key: str) -> int:
        return self._model_idx.get(key, 0)

    def dataset_index(self, key: str) -> int:
        return self._dataset_idx.get(key, 0)

    def task_index(self, key: str) -> int:
        return self._task_idx.get(normalize_key(key), 0)

    def metric_index(self, key: str) -> int:
        return self._metric_idx.get(normalize_key(key), 0)

    def family_index(self, key: str | None) -> int:
        if not key:
            return 0
        return self._family_idx.get(key, 0)


@dataclass
class FeatureBatch:
    """Per-row feature blocks in scoring-input order, plus the shared size/family rows.

    ``blocks`` holds Tensors for learned features and plain ndarrays for frozen
    description features, ordered [model id, name, model desc, dataset id,
    dataset desc, size, family, task, metric].
    """

    blocks: list
    e_size: nm.Tensor
    e_fam: nm.Tensor
    n_rows: int


class FeatureBuilder:
    """Assembles batched feature blocks for records over one catalog.

    The catalog supplies metadata; the vocabulary (typically from a training
    checkpoint) supplies table rows. Entities missing from the vocabulary map
    to the shared UNK row while their metadata features stay fully populated.
    """

    def __init__(self, catalog: EntityCatalog, vocab: Vocabulary, embedder, dtype=np.float32,
                 n_name_buckets: int = NAME_HASH_BUCKETS):
        self.catalog = catalog
        self.vocab = vocab
        self.embedder = embedder
        self.dtype = dtype
        self.n_name_buckets = n_name_buckets

        self.model_id_idx = np.array([vocab.model_index(m.model_key) for m in catalog.models],
                                     dtype=np.int64)
        self.dataset_id_idx = np.array([vocab.dataset_index(d.dataset_key) for d in catalog.datasets],
                                       dtype=np.int64)
        self.size_buckets = np.array([size_bucket(m.param_count) for m in catalog.models], dtype=np.int64)
        self.family_idx = np.array([vocab.family_index(resolve_family_key(m)) for m in catalog.models],
                                   dtype=np.int64)

        token_lists = [tokenize_name(m.display_name, n_name_buckets) for m in catalog.models]
        self.token_offsets = np.zeros(len(token_lists) + 1, dtype=np.int64)
        np.cumsum([len(t) for t in token_lists], out=self.token_offsets[1:])
        self.token_flat = np.array([t for lst in token_lists for t in lst], dtype=np.int64)

        self.model_desc = embedder.embed_many([m.description for m in catalog.models]).astype(dtype)
        self.dataset_desc = embedder.embed_many([d.description for d in catalog.datasets]).astype(dtype)

    def rows(self, store, model_pos: np.ndarray, dataset_pos: np.ndarray,
             task_idx: np.ndarray, metric_idx: np.ndarray,
             training: bool = False, id_dropout_rng: np.random.Generator | None = None,
             p_model: float = 0.0, p_dataset: float = 0.0,
             model_ids: np.ndarray | None = None,
             dataset_ids: np.ndarray | None = None) -> FeatureBatch:
        """Build feature blocks for rows given catalog positions and context indices.

        ``model_ids``/``dataset_ids`` override the vocabulary-derived table rows
        (e.g. a frozen ID-dropout mask for gradient checks).
        """
        model_pos = np.asarray(model_pos, dtype=np.int64)
        dataset_pos = np.asarray(dataset_pos, dtype=np.int64)

        if model_ids is None:
            model_ids = self.model_id_idx[model_pos]
        if dataset_ids is None:
            dataset_ids = self.dataset_id_idx[dataset_pos]
        m_ids = apply_id_dropout(model_ids, p_model, id_dropout_rng, training)
        d_ids = apply_id_dropout(dataset_ids, p_dataset, id_dropout_rng, training)

        # name bags for the batch rows (flat indices per row)
        counts = (self.token_offsets[model_pos + 1] - self.token_offsets[model_pos])
        offsets = np.zeros(len(model_pos) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        total = int(offsets[-1])
        pos_in_bag = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], counts)
        flat = self.token_flat[np.repeat(self.token_offsets[model_pos], counts) + pos_in_bag]

        e_mid = nm.gather_rows(store.model_id, m_ids)
        e_name = nm.bag_mean(store.name_tokens, flat, offsets)
        e_did = nm.gather_rows(store.dataset_id, d_ids)
        e_size = nm.gather_rows(store.size, self.size_buckets[model_pos])
        e_fam = nm.gather_rows(store.family, self.family_idx[model_pos])
        e_task = nm.gather_rows(store.task, np.asarray(task_idx, dtype=np.int64))
        e_metric = nm.gather_rows(store.metric, np.asarray(metric_idx, dtype=np.int64))

        blocks = [
            e_mid,
            e_name,
            self.model_desc[model_pos],
            e_did,
            self.dataset_desc[dataset_pos],
            e_size,
            e_fam,
            e_task,
            e_metric,
        ]
        return FeatureBatch(blocks=blocks, e_size=e_size, e_fam=e_fam, n_rows=len(model_pos))

    @classmethod
    def for_cold_entities(cls, models: list[ModelMeta], datasets: list[DatasetMeta],
                          vocab: Vocabulary, embedder, dtype=np.float32,
                          n_name_buckets: int = NAME_HASH_BUCKETS) -> "FeatureBuilder":
        """Builder over ad-hoc metadata (cold-start queries)."""
        return cls(EntityCatalog(list(models), list(datasets)), vocab, embedder, dtype, n_name_buckets)
