"""Interaction-record ingestion, deduplication, evaluation groups, and splits.

Raw performance records arrive as JSONL tuples (model, dataset, task, metric,
value, tier). Ingestion normalizes keys, deduplicates by source-tier priority,
stubs missing entity metadata, and derives per-(dataset, task, metric)
evaluation groups with oriented, z-scored, rank-ordered targets.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GroupTooSmall, InvalidMeta, InvalidSpec

TIERS = ("leaderboard", "structured", "parsed")
_TIER_PRIORITY = {"parsed": 0, "structured": 1, "leaderboard": 2}

DEFAULT_LOWER_BETTER = ("wer", "cer", "perplexity", "loss", "fid", "mae", "mse", "rmse")

N_SIZE_BUCKETS = 21
UNKNOWN_SIZE_BUCKET = 20

_WS_RE = re.compile(r"\s+")
_NON_ALNUM_RE = re.compile(r"[^a-z0-9]+")


def normalize_key(s: str) -> str:
    """Lowercase, trim, and collapse internal whitespace to single underscores."""
    return _WS_RE.sub("_", s.strip().lower())


@dataclass(frozen=True)
class InteractionRecord:
    """One observed (model, dataset, task, metric, value) tuple with its provenance tier."""

    model_key: str
    dataset_key: str
    task_key: str
    metric_key: str
    value: float
    source_tier: str = "parsed"

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.model_key, self.dataset_key, self.task_key, self.metric_key)


@dataclass(frozen=True)
class ModelMeta:
    model_key: str
    display_name: str = ""
    description: str = ""
    param_count: int | None = None
    family_key: str | None = None


@dataclass(frozen=True)
class DatasetMeta:
    dataset_key: str
    display_name: str = ""
    description: str = ""


class MetricRegistry:
    """Maps metric keys to an orientation; lower-is-better matched by substring."""

    def __init__(self, lower_is_better=DEFAULT_LOWER_BETTER):
        self.lower_is_better = tuple(normalize_key(s) for s in lower_is_better)

    def orientation(self, metric_key: str) -> str:
        key = normalize_key(metric_key)
        for sub in self.lower_is_better:
            if sub in key:
                return "lower_better"
        return "higher_better"

    @classmethod
    def from_config(cls, text: str) -> "MetricRegistry":
        """Parse a key/value config file with a ``lower_is_better = [...]`` line."""
        values = parse_kv_config(text)
        subs = values.get("lower_is_better", list(DEFAULT_LOWER_BETTER))
        if not isinstance(subs, list):
            raise InvalidSpec("lower_is_better must be a list of strings")
        return cls(tuple(str(s) for s in subs))


def parse_kv_config(text: str) -> dict:
    """Parse simple ``key = value`` lines; values are python/toml-style literals."""
    import ast

    out: dict = {}
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"config line {i}: expected key = value")
        key, _, raw = line.partition("=")
        raw = raw.strip()
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw.strip("\"'")
        out[key.strip()] = value
    return out


@dataclass
class EvaluationGroup:
    """All records sharing a (dataset, task, metric) key, best member first.

    Members are stored sorted by rank, so ``ranks`` is always 1..M in order.
    """

    group_key: tuple[str, str, str]
    orientation: str
    model_indices: np.ndarray  # positions in the corpus catalog, rank order
    raw_values: np.ndarray
    z_values: np.ndarray
    ranks: np.ndarray

    @property
    def size(self) -> int:
        return len(self.model_indices)


@dataclass
class SplitSpec:
    """How to carve a corpus into train/val/test; exactly one of fraction/holdout_keys."""

    mode: str  # mask_entries | holdout_datasets | holdout_models
    fraction: float | None = None
    seed: int = 0
    holdout_keys: list[str] | None = None
    val_model_fraction: float = 0.05

    def validate(self) -> None:
        if self.mode not in ("mask_entries", "holdout_datasets", "holdout_models"):
            raise InvalidSpec(f"unknown split mode {self.mode!r}")
        if (self.fraction is None) == (self.holdout_keys is None):
            raise InvalidSpec("exactly one of fraction / holdout_keys must be set")
        if self.fraction is not None and not (0.0 < self.fraction <= 1.0):
            raise InvalidSpec(f"fraction {self.fraction} outside (0, 1]")
        if self.holdout_keys is not None and self.mode == "mask_entries":
            raise InvalidSpec("mask_entries splits take a fraction, not holdout keys")


@dataclass
class IngestReport:
    stubbed_models: int = 0
    stubbed_datasets: int = 0
    line_errors: list[tuple[str, int, str]] = field(default_factory=list)
    meta_conflicts: list[str] = field(default_factory=list)


@dataclass
class EntityCatalog:
    """Vocabularies and metadata for the models and datasets a corpus references."""

    models: list[ModelMeta]
    datasets: list[DatasetMeta]
    model_index: dict[str, int] = field(default_factory=dict)
    dataset_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.model_index:
            self.model_index = {m.model_key: i for i, m in enumerate(self.models)}
        if not self.dataset_index:
            self.dataset_index = {d.dataset_key: i for i, d in enumerate(self.datasets)}


class Corpus:
    """Immutable bundle of deduplicated records, entity catalog, and groups."""

    def __init__(self, records: list[InteractionRecord], catalog: EntityCatalog,
                 registry: MetricRegistry, report: IngestReport | None = None):
        self.records = sorted(records, key=lambda r: (r.dataset_key, r.task_key, r.metric_key, r.model_key))
        self.catalog = catalog
        self.registry = registry
        self.report = report or IngestReport()
        self.groups = build_groups(self.records, catalog, registry)

    @property
    def n_records(self) -> int:
        return len(self.records)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def record_keys(self) -> set[tuple[str, str, str, str]]:
        return {r.key for r in self.records}

    def task_keys(self) -> list[str]:
        return sorted({r.task_key for r in self.records})

    def metric_keys(self) -> list[str]:
        return sorted({r.metric_key for r in self.records})

    def subset(self, records: list[InteractionRecord]) -> "Corpus":
        """New corpus over a record subset; catalog restricted to referenced entities."""
        model_keys = {r.model_key for r in records}
        dataset_keys = {r.dataset_key for r in records}
        models = [m for m in self.catalog.models if m.model_key in model_keys]
        datasets = [d for d in self.catalog.datasets if d.dataset_key in dataset_keys]
        return Corpus(records, EntityCatalog(models, datasets), self.registry, IngestReport())

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "lower_is_better": list(self.registry.lower_is_better),
            "records": [
                {"model": r.model_key, "dataset": r.dataset_key, "task": r.task_key,
                 "metric": r.metric_key, "value": r.value, "tier": r.source_tier}
                for r in self.records
            ],
            "models": [_model_meta_json(m) for m in self.catalog.models],
            "datasets": [{"key": d.dataset_key, "name": d.display_name, "description": d.description}
                         for d in self.catalog.datasets],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Corpus":
        payload = json.loads(text)
        if payload.get("version") != 1:
            raise InvalidSpec(f"unsupported corpus version {payload.get('version')!r}")
        registry = MetricRegistry(tuple(payload["lower_is_better"]))
        records = [InteractionRecord(r["model"], r["dataset"], r["task"], r["metric"],
                                     float(r["value"]), r["tier"])
                   for r in payload["records"]]
        models = [ModelMeta(m["key"], m.get("name", ""), m.get("description", ""),
                            m.get("params"), m.get("family"))
                  for m in payload["models"]]
        datasets = [DatasetMeta(d["key"], d.get("name", ""), d.get("description", ""))
                    for d in payload["datasets"]]
        return cls(records, EntityCatalog(models, datasets), registry)

    def export_jsonl(self) -> tuple[str, str, str]:
        """Re-serialize as (records, models, datasets) JSONL streams."""
        rec_lines = [json.dumps({"model": r.model_key, "dataset": r.dataset_key, "task": r.task_key,
                                 "metric": r.metric_key, "value": r.value, "tier": r.source_tier},
                                sort_keys=True) for r in self.records]
        model_lines = [json.dumps(_model_meta_json(m), sort_keys=True) for m in self.catalog.models]
        ds_lines = [json.dumps({"key": d.dataset_key, "name": d.display_name,
                                "description": d.description}, sort_keys=True)
                    for d in self.catalog.datasets]
        return "\n".join(rec_lines), "\n".join(model_lines), "\n".join(ds_lines)

    def same_contents(self, other: "Corpus") -> bool:
        return (self.records == other.records
                and self.catalog.models == other.catalog.models
                and self.catalog.datasets == other.catalog.datasets)


def _model_meta_json(m: ModelMeta) -> dict:
    out = {"key": m.model_key, "name": m.display_name, "description": m.description}
    if m.param_count is not None:
        out["params"] = m.param_count
    if m.family_key is not None:
        out["family"] = m.family_key
    return out


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _iter_lines(source):
    if isinstance(source, str):
        yield from source.splitlines()
    elif source is None:
        return
    else:
        for line in source:
            yield line.rstrip("\n")


def ingest(records_stream, model_meta_stream=None, dataset_meta_stream=None,
           registry: MetricRegistry | None = None) -> Corpus:
    """Single-pass ingestion of JSONL streams into a deduplicated Corpus.

    Malformed lines are reported with their line number and skipped; records
    referencing unknown entities get stub metadata instead of being dropped.
    """
    registry = registry or MetricRegistry()
    report = IngestReport()

    models: dict[str, ModelMeta] = {}
    for ln, line in enumerate(_iter_lines(model_meta_stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            key = normalize_key(str(obj["key"]))
            if not key:
                raise ValueError("empty model key")
            params = obj.get("params")
            if params is not None:
                params = int(params)
                if params < 1:
                    raise ValueError("params must be >= 1")
            family = obj.get("family")
            meta = ModelMeta(key, str(obj.get("name", key)), str(obj.get("description", "")),
                             params, normalize_key(str(family)) if family else None)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            report.line_errors.append(("models", ln, str(exc)))
            continue
        if key in models:
            if params is not None and models[key].param_count is not None \
                    and models[key].param_count != params:
                report.meta_conflicts.append(
                    f"model {key}: param_count {params} conflicts with {models[key].param_count}; kept first")
            continue  # keep first
        models[key] = meta

    datasets: dict[str, DatasetMeta] = {}
    for ln, line in enumerate(_iter_lines(dataset_meta_stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            key = normalize_key(str(obj["key"]))
            if not key:
                raise ValueError("empty dataset key")
            meta = DatasetMeta(key, str(obj.get("name", key)), str(obj.get("description", "")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            report.line_errors.append(("datasets", ln, str(exc)))
            continue
        if key not in datasets:
            datasets[key] = meta

    kept: dict[tuple[str, str, str, str], InteractionRecord] = {}
    stub_models: set[str] = set()
    stub_datasets: set[str] = set()
    for ln, line in enumerate(_iter_lines(records_stream), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = InteractionRecord(
                model_key=normalize_key(str(obj["model"])),
                dataset_key=normalize_key(str(obj["dataset"])),
                task_key=normalize_key(str(obj["task"])),
                metric_key=normalize_key(str(obj["metric"])),
                value=float(obj["value"]),
                source_tier=str(obj.get("tier", "parsed")),
            )
            if not all((rec.model_key, rec.dataset_key, rec.task_key, rec.metric_key)):
                raise ValueError("empty key after normalization")
            if not math.isfinite(rec.value):
                raise ValueError(f"non-finite value {rec.value}")
            if rec.source_tier not in _TIER_PRIORITY:
                raise ValueError(f"unknown tier {rec.source_tier!r}")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            report.line_errors.append(("records", ln, str(exc)))
            continue
        prev = kept.get(rec.key)
        if prev is None or _TIER_PRIORITY[rec.source_tier] >= _TIER_PRIORITY[prev.source_tier]:
            kept[rec.key] = rec
        if rec.model_key not in models:
            models[rec.model_key] = ModelMeta(rec.model_key, rec.model_key, "")
            stub_models.add(rec.model_key)
        if rec.dataset_key not in datasets:
            datasets[rec.dataset_key] = DatasetMeta(rec.dataset_key, rec.dataset_key, "")
            stub_datasets.add(rec.dataset_key)

    report.stubbed_models = len(stub_models)
    report.stubbed_datasets = len(stub_datasets)

    records = list(kept.values())
    catalog = EntityCatalog(
        models=sorted(models.values(), key=lambda m: m.model_key),
        datasets=sorted(datasets.values(), key=lambda d: d.dataset_key),
    )
    return Corpus(records, catalog, registry, report)


def deduplicate(records: list[InteractionRecord]) -> list[InteractionRecord]:
    """At most one record per (m, d, t, mu); higher tier wins, then last-seen."""
    kept: dict[tuple[str, str, str, str], InteractionRecord] = {}
    for rec in records:
        prev = kept.get(rec.key)
        if prev is None or _TIER_PRIORITY[rec.source_tier] >= _TIER_PRIORITY[prev.source_tier]:
            kept[rec.key] = rec
    return list(kept.values())


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------


def orient_and_zscore(group_records: list[InteractionRecord], registry: MetricRegistry,
                      catalog: EntityCatalog) -> EvaluationGroup:
    """Orient, z-score (population std, clipped to [-3, 3]), and rank one group."""
    if len(group_records) < 2:
        raise GroupTooSmall(f"group with {len(group_records)} member(s)")
    metric_key = group_records[0].metric_key
    orientation = registry.orientation(metric_key)
    sign = -1.0 if orientation == "lower_better" else 1.0

    order = sorted(group_records, key=lambda r: (-sign * r.value, r.model_key))
    oriented = np.array([sign * r.value for r in order], dtype=np.float64)
    mean = oriented.mean()
    std = oriented.std()  # population
    if std == 0.0:
        z = np.zeros_like(oriented)
    else:
        z = (oriented - mean) / std
    z = np.clip(z, -3.0, 3.0)

    return EvaluationGroup(
        group_key=(group_records[0].dataset_key, group_records[0].task_key, metric_key),
        orientation=orientation,
        model_indices=np.array([catalog.model_index[r.model_key] for r in order], dtype=np.int64),
        raw_values=np.array([r.value for r in order], dtype=np.float64),
        z_values=z.astype(np.float64),
        ranks=np.arange(1, len(order) + 1, dtype=np.int64),
    )


def build_groups(records: list[InteractionRecord], catalog: EntityCatalog,
                 registry: MetricRegistry) -> dict[tuple[str, str, str], EvaluationGroup]:
    by_key: dict[tuple[str, str, str], list[InteractionRecord]] = {}
    for r in records:
        by_key.setdefault((r.dataset_key, r.task_key, r.metric_key), []).append(r)
    groups = {}
    for key in sorted(by_key):
        members = by_key[key]
        if len(members) < 2:
            continue  # singleton groups carry no ranking signal
        groups[key] = orient_and_zscore(members, registry, catalog)
    return groups


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split(corpus: Corpus, spec: SplitSpec) -> dict[str, Corpus]:
    """Deterministic train/val/test split; val is always model-disjoint from train."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))

    test_records: list[InteractionRecord] = []
    pool_records: list[InteractionRecord] = []

    if spec.mode == "mask_entries":
        grouped: dict[tuple[str, str, str], list[InteractionRecord]] = {}
        for r in corpus.records:
            grouped.setdefault((r.dataset_key, r.task_key, r.metric_key), []).append(r)
        for key in sorted(grouped):
            members = sorted(grouped[key], key=lambda r: r.model_key)
            mask = rng.random(len(members)) < spec.fraction
            for r, to_test in zip(members, mask):
                (test_records if to_test else pool_records).append(r)
    elif spec.mode == "holdout_datasets":
        held = _select_keys(sorted({r.dataset_key for r in corpus.records}), spec, rng)
        for r in corpus.records:
            (test_records if r.dataset_key in held else pool_records).append(r)
    else:  # holdout_models
        held = _select_keys(sorted({r.model_key for r in corpus.records}), spec, rng)
        for r in corpus.records:
            (test_records if r.model_key in held else pool_records).append(r)

    pool_models = sorted({r.model_key for r in pool_records})
    val_records: list[InteractionRecord] = []
    train_records = pool_records
    if pool_models and spec.val_model_fraction > 0.0:
        n_val = max(1, int(round(spec.val_model_fraction * len(pool_models))))
        n_val = min(n_val, max(0, len(pool_models) - 1))
        if n_val > 0:
            val_models = set(rng.choice(pool_models, size=n_val, replace=False).tolist())
            val_records = [r for r in pool_records if r.model_key in val_models]
            train_records = [r for r in pool_records if r.model_key not in val_models]

    return {
        "train": corpus.subset(train_records),
        "val": corpus.subset(val_records),
        "test": corpus.subset(test_records),
    }


def _select_keys(keys: list[str], spec: SplitSpec, rng: np.random.Generator) -> set[str]:
    if spec.holdout_keys is not None:
        return {normalize_key(k) for k in spec.holdout_keys}
    n = int(round(spec.fraction * len(keys)))
    n = min(max(n, 1), len(keys))
    return set(rng.choice(keys, size=n, replace=False).tolist())


# ---------------------------------------------------------------------------
# structural attributes
# ---------------------------------------------------------------------------


def size_bucket(param_count: int | None) -> int:
    """Half-decade buckets over [1e4, 1e14): bucket 20 means unknown."""
    if param_count is None:
        return UNKNOWN_SIZE_BUCKET
    if param_count < 1:
        raise InvalidMeta(f"param_count {param_count} must be >= 1")
    b = int(math.floor(2.0 * (math.log10(param_count) - 4.0)))
    return min(max(b, 0), 19)


def resolve_family_key(meta: ModelMeta) -> str | None:
    """Explicit family key if present, else the first alphabetic name token."""
    if meta.family_key:
        key = normalize_key(meta.family_key)
        if key:
            return key
    name = meta.display_name or ""
    if "/" in name:
        name = name.rsplit("/", 1)[1]
    for token in _NON_ALNUM_RE.split(name.lower()):
        if token and token.isalpha():
            return token
    return None
