"""Deterministic synthetic ecosystem with planted structure.

Latent quality is additive: a size slope over log10(params), a family-task
affinity, a dataset offset, and per-pair noise. Observed values are
metric-specific monotone transforms of that quality, so orientation handling
and within-group ranking are exercised end to end. The generated corpus is
always ingested through the standard JSONL path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import Corpus, MetricRegistry, ingest, normalize_key

TASK_CLUSTERS = ("vision", "text", "speech", "retrieval", "tabular", "graphs",
                 "audio", "code", "multilingual", "reasoning")

# metric name -> monotone transform of latent quality
METRIC_KINDS = (
    ("accuracy", "identity"),
    ("quality_f1", "logistic"),
    ("eval_loss", "negated"),  # planted lower-is-better; matches the "loss" registry entry
)


@dataclass
class SynthConfig:
    n_models: int = 500
    n_datasets: int = 60
    n_tasks: int = 6
    n_families: int = 8
    n_metrics_per_dataset: int = 3
    size_slope: float = 0.5          # z units per log10(params)
    affinity_std: float = 0.8        # family-task affinity scale
    dataset_offset_std: float = 0.5
    noise_std: float = 0.3
    obs_density: float = 0.4
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_models, self.n_datasets, self.n_tasks, self.n_families,
               self.n_metrics_per_dataset) < 1:
            raise ValueError("all counts must be >= 1")
        if not (0.0 < self.obs_density <= 1.0):
            raise ValueError("obs_density must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class PlantedTruth:
    """Noise-free generative state for oracle rankings."""

    config: SynthConfig
    model_keys: list[str]
    params: np.ndarray           # (n_models,)
    family: np.ndarray           # (n_models,) family index
    dataset_keys: list[str]
    task_of_dataset: np.ndarray  # (n_datasets,) task index
    dataset_offset: np.ndarray   # (n_datasets,)
    affinity: np.ndarray         # (n_families, n_tasks)
    task_names: list[str]

    def model_pos(self, model_key: str) -> int:
        return self._model_pos[model_key]

    def dataset_pos(self, dataset_key: str) -> int:
        return self._dataset_pos[dataset_key]

    def __post_init__(self):
        self._model_pos = {k: i for i, k in enumerate(self.model_keys)}
        self._dataset_pos = {k: i for i, k in enumerate(self.dataset_keys)}

    def latent_quality(self, model_key: str, dataset_key: str) -> float:
        """Noise-free quality of one (model, dataset) pair."""
        m = self.model_pos(model_key)
        d = self.dataset_pos(dataset_key)
        return (self.config.size_slope * np.log10(self.params[m])
                + self.affinity[self.family[m], self.task_of_dataset[d]]
                + self.dataset_offset[d])

    def to_json(self) -> str:
        payload = {
            "config": self.config.to_dict(),
            "model_keys": self.model_keys,
            "params": self.params.tolist(),
            "family": self.family.tolist(),
            "dataset_keys": self.dataset_keys,
            "task_of_dataset": self.task_of_dataset.tolist(),
            "dataset_offset": self.dataset_offset.tolist(),
            "affinity": self.affinity.tolist(),
            "task_names": self.task_names,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PlantedTruth":
        p = json.loads(text)
        return cls(SynthConfig.from_dict(p["config"]), p["model_keys"],
                   np.asarray(p["params"]), np.asarray(p["family"]),
                   p["dataset_keys"], np.asarray(p["task_of_dataset"]),
                   np.asarray(p["dataset_offset"]), np.asarray(p["affinity"]),
                   p["task_names"])


def _task_name(t: int) -> str:
    return TASK_CLUSTERS[t] if t < len(TASK_CLUSTERS) else f"task{t}"


def _model_description(family: str, specialty: str, params: float) -> str:
    return (f"A {family} family model with {params / 1e9:.2f} billion parameters, "
            f"strongest on {specialty} workloads and related {specialty} benchmarks.")


def _dataset_description(task: str, idx: int) -> str:
    return (f"Benchmark {idx:03d} for {task} evaluation; measures {task} capability "
            f"across held-out examples with standard {task} protocols.")


def generate_streams(config: SynthConfig) -> tuple[str, str, str, PlantedTruth]:
    """Produce (records.jsonl, models.jsonl, datasets.jsonl) text plus the truth."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))

    params = 10.0 ** rng.uniform(7.0, 11.0, size=config.n_models)
    family = rng.integers(0, config.n_families, size=config.n_models)
    affinity = rng.normal(0.0, config.affinity_std, size=(config.n_families, config.n_tasks)) \
        if config.affinity_std > 0 else np.zeros((config.n_families, config.n_tasks))
    task_of_dataset = rng.integers(0, config.n_tasks, size=config.n_datasets)
    dataset_offset = rng.normal(0.0, config.dataset_offset_std, size=config.n_datasets)
    task_names = [_task_name(t) for t in range(config.n_tasks)]

    model_keys, model_lines = [], []
    for i in range(config.n_models):
        fam_name = f"fam{family[i]}"
        key = normalize_key(f"{fam_name}-m{i:04d}-{params[i] / 1e9:.2f}b")
        model_keys.append(key)
        specialty = task_names[int(np.argmax(affinity[family[i]]))]
        model_lines.append(json.dumps({
            "key": key,
            "name": f"{fam_name}/{fam_name.capitalize()}-M{i:04d}-{params[i] / 1e9:.2f}B",
            "description": _model_description(fam_name, specialty, params[i]),
            "params": int(params[i]),
            "family": fam_name,
        }, sort_keys=True))

    dataset_keys, dataset_lines = [], []
    for j in range(config.n_datasets):
        task = task_names[task_of_dataset[j]]
        key = normalize_key(f"ds{j:03d}-{task}")
        dataset_keys.append(key)
        dataset_lines.append(json.dumps({
            "key": key,
            "name": f"DS{j:03d} {task.capitalize()} Benchmark",
            "description": _dataset_description(task, j),
        }, sort_keys=True))

    truth = PlantedTruth(config, model_keys, params, family, dataset_keys,
                         task_of_dataset, dataset_offset, affinity, task_names)

    metric_kinds = [METRIC_KINDS[k % len(METRIC_KINDS)] for k in range(config.n_metrics_per_dataset)]
    log_params = np.log10(params)
    record_lines = []
    for j in range(config.n_datasets):
        task = task_names[task_of_dataset[j]]
        q0 = (config.size_slope * log_params
              + affinity[family, task_of_dataset[j]]
              + dataset_offset[j])
        noise = rng.normal(0.0, config.noise_std, size=config.n_models) \
            if config.noise_std > 0 else np.zeros(config.n_models)
        q = q0 + noise  # one draw per (model, dataset); metrics transform the same q
        keep = rng.random((config.n_models, len(metric_kinds))) < config.obs_density
        tiers = rng.integers(0, 3, size=(config.n_models, len(metric_kinds)))
        for k, (metric, kind) in enumerate(metric_kinds):
            if kind == "identity":
                values = q
            elif kind == "logistic":
                # centered so values spread over (0, 1) instead of saturating
                values = 1.0 / (1.0 + np.exp(-(q - q0.mean())))
            else:
                values = -q
            for i in range(config.n_models):
                if keep[i, k]:
                    record_lines.append(json.dumps({
                        "model": model_keys[i], "dataset": dataset_keys[j],
                        "task": task, "metric": metric,
                        "value": float(values[i]),
                        "tier": ("parsed", "structured", "leaderboard")[tiers[i, k]],
                    }, sort_keys=True))

    return "\n".join(record_lines), "\n".join(model_lines), "\n".join(dataset_lines), truth


def generate(config: SynthConfig, registry: MetricRegistry | None = None) -> tuple[Corpus, PlantedTruth]:
    """Generate and ingest through the standard path."""
    records, models, datasets, truth = generate_streams(config)
    corpus = ingest(records, models, datasets, registry or MetricRegistry())
    return corpus, truth


def oracle_rank(truth: PlantedTruth, corpus: Corpus, group_key: tuple[str, str, str]) -> np.ndarray:
    """Noise-free ordering of a group's members (positions into the stored member list)."""
    group = corpus.groups[group_key]
    keys = [corpus.catalog.models[i].model_key for i in group.model_indices]
    q0 = np.array([truth.latent_quality(k, group_key[0]) for k in keys])
    return np.argsort(-q0, kind="stable")


def oracle_scores(truth: PlantedTruth, corpus: Corpus, group_key: tuple[str, str, str]) -> np.ndarray:
    """Noise-free latent quality for each stored member of a group."""
    group = corpus.groups[group_key]
    keys = [corpus.catalog.models[i].model_key for i in group.model_indices]
    return np.array([truth.latent_quality(k, group_key[0]) for k in keys])


def noise_ceiling(truth: PlantedTruth, corpus: Corpus, n_groups: int = 200,
                  seed: int = 0) -> float:
    """1/M-weighted tau of noise-free scores against observed rankings.

    Monte Carlo over sampled groups; an upper bound on what any model that
    cannot see the observation noise can reach.
    """
    from .metrics import weighted_kendall_tau

    rng = np.random.default_rng(seed)
    keys = sorted(corpus.groups)
    if len(keys) > n_groups:
        pick = rng.choice(len(keys), size=n_groups, replace=False)
        keys = [keys[i] for i in sorted(pick)]
    num = den = 0.0
    for key in keys:
        group = corpus.groups[key]
        tau = weighted_kendall_tau(oracle_scores(truth, corpus, key), group.ranks)
        num += tau / group.size
        den += 1.0 / group.size
    return num / den
