"""Multi-objective training loop and checkpoint persistence.

Each step pairs one listwise batch (whole ranklists) with one pairwise batch
(anchor/negative samples); the weighted sum of Plackett-Luce, BPR, and
pointwise-regression losses is backpropagated, clipped to a global norm, and
applied with AdamW. Early stopping tracks weighted Kendall tau on a
model-disjoint validation split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import Corpus, DatasetMeta, EntityCatalog, EvaluationGroup, ModelMeta
from .embedding import DESC_DIM, FeatureBuilder, HashedTextEmbedder, RemoteTextEmbedder, Vocabulary
from .errors import (CheckpointShapeError, CheckpointTruncatedError, CheckpointError,
                     CheckpointVersionError, ContractError, NumericsError)
from .metrics import score_corpus_groups, weighted_kendall_tau
from .params import ModelConfig, ParameterStore

CHECKPOINT_MAGIC = b"MRNKCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Loss weights, batch shapes, optimizer and regularization settings."""

    lambda_list: float = 0.5
    lambda_pair: float = 1.0
    lambda_point: float = 0.1
    batch_groups: int = 8
    batch_pairs: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    patience: int = 20
    p_model_dropout: float = 0.1
    p_dataset_dropout: float = 0.1
    max_epochs: int = 200
    max_group_size: int = 512
    seed: int = 0

    def validate(self) -> None:
        if min(self.lambda_list, self.lambda_pair, self.lambda_point) < 0:
            raise ContractError("loss weights must be >= 0")
        if self.batch_groups < 1 or self.batch_pairs < 1:
            raise ContractError("batch sizes must be >= 1")
        if not (0.0 <= self.p_model_dropout < 1.0 and 0.0 <= self.p_dataset_dropout < 1.0):
            raise ContractError("ID dropout probabilities must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def from_config_text(cls, text: str) -> "TrainConfig":
        from .corpus import parse_kv_config

        values = parse_kv_config(text)
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bpr_loss(s_plus: nm.Tensor, s_minus: nm.Tensor) -> nm.Tensor:
    """Mean of -log sigmoid(margin) over pairs, via the stable softplus(-margin)."""
    margin = nm.sub(s_plus, s_minus)
    return nm.tmean(nm.softplus(nm.scale(margin, -1.0)))


def plackett_luce_loss(scores: nm.Tensor) -> nm.Tensor:
    """Listwise negative log-likelihood / M for scores ordered best-first.

    Computed as mean_i [log sum_{j>=i} exp(s_j) - s_i] with a detached max
    shift, which leaves gradients exact.
    """
    if scores.data.ndim != 1 or scores.data.size == 0:
        raise ContractError(f"plackett_luce_loss expects a non-empty 1-D score list, got {scores.data.shape}")
    m = float(scores.data.max())
    tail = nm.reverse_cumsum(nm.exp(nm.add_const(scores, -m)))
    lse = nm.add_const(nm.log(tail), m)
    return nm.tmean(nm.sub(lse, scores))


def pointwise_loss(z_hat: nm.Tensor, z_target: np.ndarray) -> nm.Tensor:
    """Mean squared error against the standardized within-group scores."""
    target = np.asarray(z_target, dtype=z_hat.data.dtype)
    if target.size != z_hat.data.size:
        raise ContractError(f"pointwise_loss length mismatch: {target.size} targets "
                            f"for {z_hat.data.size} predictions")
    diff = nm.add_const(z_hat, -target.reshape(z_hat.data.shape))
    return nm.tmean(nm.mul(diff, diff))


def sample_pairs(group: EvaluationGroup, rng: np.random.Generator, count: int) -> list[tuple[int, int]]:
    """(anchor, negative) rank positions: anchor uniform, negative uniform below it.

    Pairs whose z-values tie are resampled up to 10 times, then skipped.
    """
    m = group.size
    if m < 2:
        raise ContractError("pair sampling needs a group with >= 2 members")
    z = group.z_values
    pairs = []
    for _ in range(count):
        for _attempt in range(11):
            i = int(rng.integers(0, m - 1))
            j = int(rng.integers(i + 1, m))
            if z[i] != z[j]:
                pairs.append((i, j))
                break
    return pairs


def total_loss(list_batch: list[tuple[nm.Tensor, np.ndarray, nm.Tensor]],
               pair_batch: tuple[nm.Tensor, nm.Tensor] | None,
               config: TrainConfig) -> nm.Tensor:
    """lambda-weighted sum: mean listwise loss over groups, mean BPR over pairs,
    and pointwise MSE over the listwise batch's members."""
    if not list_batch and pair_batch is None:
        raise ContractError("total_loss needs at least one non-empty batch")
    terms: list[nm.Tensor] = []
    if list_batch:
        group_losses = [plackett_luce_loss(scores) for scores, _, _ in list_batch]
        acc = group_losses[0]
        for gl in group_losses[1:]:
            acc = nm.add(acc, gl)
        terms.append(nm.scale(acc, config.lambda_list / len(group_losses)))

        z_hats = [zh for _, _, zh in list_batch]
        z_all = np.concatenate([z for _, z, _ in list_batch])
        zh_all = z_hats[0] if len(z_hats) == 1 else nm.concat(
            [nm.reshape(z, (-1, 1)) for z in z_hats], axis=0)
        terms.append(nm.scale(pointwise_loss(zh_all, z_all), config.lambda_point))
    if pair_batch is not None:
        terms.append(nm.scale(bpr_loss(*pair_batch), config.lambda_pair))
    out = terms[0]
    for t in terms[1:]:
        out = nm.add(out, t)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def embedder_from_spec(spec: dict):
    if spec.get("kind") == "remote":
        return RemoteTextEmbedder(model=spec.get("model", "text-embedding"),
                                  cache_dir=spec.get("cache_dir", ".embed_cache"),
                                  dim=int(spec.get("dim", DESC_DIM)))
    return HashedTextEmbedder(dim=int(spec.get("dim", DESC_DIM)), seed=int(spec.get("seed", 0)))


@dataclass
class Checkpoint:
    """Everything needed to score candidates: config, vocab, catalog, parameters."""

    model_config: ModelConfig
    train_config: TrainConfig | None
    vocab: Vocabulary
    catalog: EntityCatalog
    store: ParameterStore
    embedder_spec: dict = field(default_factory=lambda: {"kind": "hashed_fallback", "dim": DESC_DIM, "seed": 0})
    best_val_tau_w: float | None = None
    epoch: int = 0
    adamw_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def embedder(self):
        if not hasattr(self, "_embedder") or self._embedder is None:
            self._embedder = embedder_from_spec(self.embedder_spec)
        return self._embedder

    def builder_for(self, catalog: EntityCatalog) -> FeatureBuilder:
        return FeatureBuilder(catalog, self.vocab, self.embedder, dtype=self.store.dtype,
                              n_name_buckets=self.model_config.n_name_buckets)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """JSON header + raw little-endian arrays; byte-stable for identical contents."""
    arrays = ckpt.store.arrays()
    manifest = []
    offset = 0
    blobs = []
    dtype = "<f4" if ckpt.store.dtype == np.float32 else "<f8"
    for name, arr in arrays:
        blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    adamw_header = None
    if ckpt.adamw_state is not None:
        adamw_arrays = []
        for name in ("m", "v"):
            blob = np.ascontiguousarray(ckpt.adamw_state[name], dtype=dtype).tobytes()
            adamw_arrays.append({"name": name, "shape": [len(ckpt.adamw_state[name])],
                                 "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)
        adamw_header = {"step": ckpt.adamw_state["step"], "arrays": adamw_arrays}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": dtype,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "vocab": {"models": ckpt.vocab.models, "datasets": ckpt.vocab.datasets,
                  "tasks": ckpt.vocab.tasks, "metrics": ckpt.vocab.metrics,
                  "families": ckpt.vocab.families},
        "catalog": {
            "models": [{"key": m.model_key, "name": m.display_name, "description": m.description,
                        "params": m.param_count, "family": m.family_key}
                       for m in ckpt.catalog.models],
            "datasets": [{"key": d.dataset_key, "name": d.display_name, "description": d.description}
                         for d in ckpt.catalog.datasets],
        },
        "embedder": ckpt.embedder_spec,
        "best_val_tau_w": ckpt.best_val_tau_w,
        "epoch": ckpt.epoch,
        "arrays": manifest,
        "adamw": adamw_header,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    header_len = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))[0]
    body_start = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < body_start + header_len:
        raise CheckpointTruncatedError("header shorter than declared")
    try:
        header = json.loads(raw[body_start:body_start + header_len].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"format version {header.get('format_version')!r}, "
                                     f"expected {CHECKPOINT_VERSION}")
    dtype = np.dtype(header["dtype"])
    blob = raw[body_start + header_len:]

    vocab = Vocabulary(**header["vocab"])
    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"]) if header["train_config"] else None
    catalog = EntityCatalog(
        models=[ModelMeta(m["key"], m["name"], m["description"], m["params"], m["family"])
                for m in header["catalog"]["models"]],
        datasets=[DatasetMeta(d["key"], d["name"], d["description"])
                  for d in header["catalog"]["datasets"]],
    )
    store = ParameterStore(model_config, vocab, dtype=dtype, init=False)
    expected = {name: tuple(shape) for name, shape in store._shapes}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        if entry["name"] not in expected or expected[entry["name"]] != shape:
            raise CheckpointShapeError(f"array {entry['name']} has unexpected shape {shape}")
        count = int(np.prod(shape))
        if entry["nbytes"] != count * dtype.itemsize:
            raise CheckpointShapeError(f"array {entry['name']}: {entry['nbytes']} bytes "
                                       f"for shape {shape}")
        if entry["offset"] + entry["nbytes"] > len(blob):
            raise CheckpointTruncatedError(f"array {entry['name']} extends past end of file")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"]).reshape(shape)
        store.tensor(entry["name"]).data[...] = arr
    if len(header["arrays"]) != len(store._shapes):
        raise CheckpointShapeError(f"{len(header['arrays'])} arrays stored, "
                                   f"expected {len(store._shapes)}")
    adamw_state = None
    if header.get("adamw"):
        adamw_state = {"step": header["adamw"]["step"]}
        for entry in header["adamw"]["arrays"]:
            count = int(np.prod(entry["shape"]))
            if entry["offset"] + entry["nbytes"] > len(blob):
                raise CheckpointTruncatedError(f"adamw array {entry['name']} extends past end of file")
            adamw_state[entry["name"]] = np.frombuffer(
                blob, dtype=dtype, count=count, offset=entry["offset"]).copy()
    return Checkpoint(model_config, train_config, vocab, catalog, store,
                      embedder_spec=header["embedder"],
                      best_val_tau_w=header["best_val_tau_w"],
                      epoch=header["epoch"], adamw_state=adamw_state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class _GroupRows:
    """Precomputed per-group index arrays for fast batch assembly."""

    __slots__ = ("group", "model_pos", "dataset_pos", "task_idx", "metric_idx", "z", "pairable")

    def __init__(self, group: EvaluationGroup, corpus: Corpus, vocab: Vocabulary, cap: int):
        size = min(group.size, cap)
        self.group = group if group.size <= cap else EvaluationGroup(
            group.group_key, group.orientation, group.model_indices[:cap],
            group.raw_values[:cap], group.z_values[:cap], group.ranks[:cap])
        g = self.group
        self.model_pos = g.model_indices
        self.dataset_pos = np.full(size, corpus.catalog.dataset_index[g.group_key[0]], dtype=np.int64)
        self.task_idx = np.full(size, vocab.task_index(g.group_key[1]), dtype=np.int64)
        self.metric_idx = np.full(size, vocab.metric_index(g.group_key[2]), dtype=np.int64)
        self.z = g.z_values.copy()
        self.pairable = bool(np.unique(g.z_values).size > 1)


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(purpose,)))


def train(splits: dict[str, Corpus], config: TrainConfig,
          model_config: ModelConfig | None = None,
          embedder_spec: dict | None = None) -> Checkpoint:
    """Train on splits["train"], early-stop on splits["val"], return the best checkpoint."""
    config.validate()
    model_config = model_config or ModelConfig()
    embedder_spec = embedder_spec or {"kind": "hashed_fallback", "dim": model_config.d_desc, "seed": 0}
    embedder = embedder_from_spec(embedder_spec)

    train_corpus = splits["train"]
    val_corpus = splits.get("val")
    if not any(g.size >= 2 for g in train_corpus.groups.values()):
        raise ContractError("train split has no group with >= 2 members")

    vocab = Vocabulary.build(train_corpus)
    store = ParameterStore(model_config, vocab, seed=config.seed)
    builder = FeatureBuilder(train_corpus.catalog, vocab, embedder, dtype=store.dtype,
                             n_name_buckets=model_config.n_name_buckets)

    group_rows = [_GroupRows(train_corpus.groups[k], train_corpus, vocab, config.max_group_size)
                  for k in sorted(train_corpus.groups)]
    truncated = sum(1 for gr, k in zip(group_rows, sorted(train_corpus.groups))
                    if gr.group.size < train_corpus.groups[k].size)
    pair_pool = [gr for gr in group_rows if gr.pairable]

    val_builder = None
    val_groups = []
    if val_corpus is not None and val_corpus.groups:
        val_builder = FeatureBuilder(val_corpus.catalog, vocab, embedder, dtype=store.dtype,
                                     n_name_buckets=model_config.n_name_buckets)
        val_groups = [val_corpus.groups[k] for k in sorted(val_corpus.groups)]

    shuffle_rng = _stream(config.seed, 1)
    pair_rng = _stream(config.seed, 2)
    id_drop_rng = _stream(config.seed, 3)
    hidden_drop_rng = _stream(config.seed, 4)

    adamw = nm.AdamWState.for_params(store.flat, lr=config.lr, weight_decay=config.weight_decay)

    best_tau: float | None = None
    best_epoch = 0
    best_flat = store.flat.copy()
    epochs_since_best = 0
    history: list[dict] = []

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(group_rows))
        epoch_losses = []
        for start in range(0, len(order), config.batch_groups):
            batch_groups = [group_rows[i] for i in order[start:start + config.batch_groups]]
            loss = _training_step(store, builder, batch_groups, pair_pool, config,
                                  pair_rng, id_drop_rng, hidden_drop_rng, adamw)
            epoch_losses.append(loss)
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else 0.0

        val_tau = None
        if val_builder is not None:
            scored = score_corpus_groups(store, val_builder, val_corpus, val_groups)
            num = den = 0.0
            for g in val_groups:
                tau = weighted_kendall_tau(scored[g.group_key][0], g.ranks)
                num += tau / g.size
                den += 1.0 / g.size
            val_tau = num / den if den else None
        history.append({"epoch": epoch, "train_loss": train_loss, "val_tau_w": val_tau})

        if val_tau is None:
            best_flat[...] = store.flat
            best_epoch = epoch
        elif best_tau is None or val_tau > best_tau:
            best_tau = val_tau
            best_epoch = epoch
            best_flat[...] = store.flat
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    store.flat[...] = best_flat
    ckpt = Checkpoint(model_config, config, vocab, train_corpus.catalog, store,
                      embedder_spec=embedder_spec, best_val_tau_w=best_tau, epoch=best_epoch,
                      history=history)
    if truncated:
        ckpt.history.append({"note": f"{truncated} listwise group(s) truncated to "
                                     f"{config.max_group_size} members"})
    return ckpt


def _training_step(store, builder, batch_groups, pair_pool, config,
                   pair_rng, id_drop_rng, hidden_drop_rng, adamw) -> float:
    # pair batch: groups drawn uniformly with replacement, then in-group sampling
    pair_specs: list[tuple[_GroupRows, int, int]] = []
    if pair_pool and config.batch_pairs > 0:
        draws = pair_rng.integers(0, len(pair_pool), size=config.batch_pairs)
        uniq, counts = np.unique(draws, return_counts=True)
        for gi, count in zip(uniq, counts):
            gr = pair_pool[int(gi)]
            for i, j in sample_pairs(gr.group, pair_rng, int(count)):
                pair_specs.append((gr, i, j))

    sizes = [len(gr.model_pos) for gr in batch_groups]
    n_list = int(np.sum(sizes))
    model_pos = [gr.model_pos for gr in batch_groups]
    dataset_pos = [gr.dataset_pos for gr in batch_groups]
    task_idx = [gr.task_idx for gr in batch_groups]
    metric_idx = [gr.metric_idx for gr in batch_groups]
    for gr, i, j in pair_specs:
        model_pos.append(gr.model_pos[[i, j]])
        dataset_pos.append(gr.dataset_pos[[i, j]])
        task_idx.append(gr.task_idx[[i, j]])
        metric_idx.append(gr.metric_idx[[i, j]])

    batch = builder.rows(store, np.concatenate(model_pos), np.concatenate(dataset_pos),
                         np.concatenate(task_idx), np.concatenate(metric_idx),
                         training=True, id_dropout_rng=id_drop_rng,
                         p_model=config.p_model_dropout, p_dataset=config.p_dataset_dropout)

    from .scorer import score_batch

    try:
        s_tilde, z_hat = score_batch(store, batch, training=True, rng=hidden_drop_rng)
        scores_flat = nm.reshape(s_tilde, (-1,))

        list_batch = []
        offset = 0
        for gr, size in zip(batch_groups, sizes):
            idx = np.arange(offset, offset + size)
            group_scores = nm.gather_rows(scores_flat, idx)
            group_zhat = nm.gather_rows(z_hat, idx)
            list_batch.append((group_scores, gr.z, group_zhat))
            offset += size

        pair_batch = None
        if pair_specs:
            pair_idx = n_list + 2 * np.arange(len(pair_specs))
            s_plus = nm.gather_rows(scores_flat, pair_idx)
            s_minus = nm.gather_rows(scores_flat, pair_idx + 1)
            pair_batch = (s_plus, s_minus)

        loss = total_loss(list_batch, pair_batch, config)
        store.zero_grads()
        nm.backward(loss)
    except NumericsError as exc:
        keys = [gr.group.group_key for gr in batch_groups]
        norm = float(np.linalg.norm(store.flat))
        raise NumericsError(f"{exc} (batch groups {keys}, parameter norm {norm:.3g})") from exc

    nm.clip_global_norm(store.flat_grad, config.clip_norm)
    nm.adamw_step(store.flat, store.flat_grad, adamw)
    return float(loss.data)
