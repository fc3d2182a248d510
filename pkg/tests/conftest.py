import numpy as np
import pytest

from modelrank import synth
from modelrank.corpus import SplitSpec, split
from modelrank.params import ModelConfig


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(d_model_id=16, d_name=32, n_name_buckets=256, d_desc=64,
                       d_dataset_id=16, d_task=16, d_metric=8, d_size=8, d_family=8,
                       prior_hidden=8, backbone_hidden=32, backbone_out=32)


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(d_model_id=8, d_name=12, n_name_buckets=64, d_desc=16,
                       d_dataset_id=8, d_task=8, d_metric=4, d_size=4, d_family=4,
                       prior_hidden=6, backbone_hidden=16, backbone_out=16)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = synth.SynthConfig(n_models=60, n_datasets=10, n_tasks=3, n_families=4, seed=7)
    corpus, truth = synth.generate(cfg)
    return corpus, truth


@pytest.fixture(scope="session")
def toy_corpus():
    cfg = synth.SynthConfig(n_models=5, n_datasets=2, n_tasks=2, n_families=2,
                            obs_density=1.0, seed=11)
    corpus, truth = synth.generate(cfg)
    return corpus, truth


@pytest.fixture(scope="session")
def small_splits(small_corpus):
    corpus, _ = small_corpus
    return split(corpus, SplitSpec(mode="mask_entries", fraction=0.1, seed=1))
