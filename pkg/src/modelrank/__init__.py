"""modelrank: learn a metric-aware ranking of candidate models for a target
dataset from leaderboard interaction records, and serve cold-start
recommendations without running any candidate."""

from .corpus import (Corpus, DatasetMeta, EvaluationGroup, InteractionRecord, MetricRegistry,
                     ModelMeta, SplitSpec, ingest, size_bucket, split)
from .embedding import FeatureBuilder, HashedTextEmbedder, RemoteTextEmbedder, Vocabulary, tokenize_name
from .metrics import RankingReport, evaluate, hit_at_k, ndcg_at_k, recall_at_k, weighted_kendall_tau
from .params import ModelConfig, ParameterStore
from .recommend import (PoolEntry, PriorProbeReport, probe_prior, recommend_top_k, replace_pool,
                        standardized_advantage)
from .synth import PlantedTruth, SynthConfig, generate, noise_ceiling, oracle_rank
from .training import (Checkpoint, TrainConfig, bpr_loss, load_checkpoint, plackett_luce_loss,
                    pointwise_loss, sample_pairs, save_checkpoint, total_loss, train)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "DatasetMeta", "EvaluationGroup", "InteractionRecord", "MetricRegistry",
    "ModelMeta", "SplitSpec", "ingest", "size_bucket", "split",
    "FeatureBuilder", "HashedTextEmbedder", "RemoteTextEmbedder", "Vocabulary", "tokenize_name",
    "RankingReport", "evaluate", "hit_at_k", "ndcg_at_k", "recall_at_k", "weighted_kendall_tau",
    "ModelConfig", "ParameterStore",
    "PoolEntry", "PriorProbeReport", "probe_prior", "recommend_top_k", "replace_pool",
    "standardized_advantage",
    "PlantedTruth", "SynthConfig", "generate", "noise_ceiling", "oracle_rank",
    "Checkpoint", "TrainConfig", "bpr_loss", "load_checkpoint", "plackett_luce_loss",
    "pointwise_loss", "sample_pairs", "save_checkpoint", "total_loss", "train",
]
