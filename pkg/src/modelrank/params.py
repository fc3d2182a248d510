"""Trainable parameter store: every embedding table, MLP weight, head, and the
score temperature, laid out in one flat buffer so the optimizer and gradient
clipping touch contiguous memory.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import numerics as nm
from .corpus import N_SIZE_BUCKETS
from .embedding import NAME_HASH_BUCKETS, DESC_DIM, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    """Embedding and network dimensions. Defaults are the full-feature setup."""

    d_model_id: int = 256
    d_name: int = 512
    n_name_buckets: int = NAME_HASH_BUCKETS
    d_desc: int = DESC_DIM
    d_dataset_id: int = 256
    d_task: int = 256
    d_metric: int = 64
    d_size: int = 64
    d_family: int = 64
    prior_hidden: int = 64
    backbone_hidden: int = 512
    backbone_out: int = 512
    backbone_dropout: float = 0.02
    tau_init: float = 10.0
    tau_floor: float = 1e-3

    @property
    def d_model(self) -> int:
        return self.d_model_id + self.d_name + self.d_desc

    @property
    def d_dataset(self) -> int:
        return self.d_dataset_id + self.d_desc

    @property
    def d_input(self) -> int:
        return (self.d_model + self.d_dataset + self.d_size + self.d_family
                + self.d_task + self.d_metric)

    @property
    def d_prior_input(self) -> int:
        return self.d_size + self.d_family

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ParameterStore:
    """Named views into one flat float buffer, each wrapped as a trainable Tensor.

    Gradients live in a parallel flat buffer, so ``zero_grads`` is one memset
    and AdamW updates are single vectorized passes.
    """

    EMBED_INIT_STD = 0.02

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0,
                 dtype=np.float32, init: bool = True):
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        c = config

        self._shapes: list[tuple[str, tuple[int, ...]]] = [
            ("model_id", (len(vocab.models) + 1, c.d_model_id)),
            ("name_tokens", (c.n_name_buckets, c.d_name)),
            ("dataset_id", (len(vocab.datasets) + 1, c.d_dataset_id)),
            ("task", (len(vocab.tasks) + 1, c.d_task)),
            ("metric", (len(vocab.metrics) + 1, c.d_metric)),
            ("size", (N_SIZE_BUCKETS, c.d_size)),
            ("family", (len(vocab.families) + 1, c.d_family)),
            ("prior_w1", (c.d_prior_input, c.prior_hidden)),
            ("prior_b1", (c.prior_hidden,)),
            ("prior_w2", (c.prior_hidden, 1)),
            ("prior_b2", (1,)),
            ("backbone_w1", (c.d_input, c.backbone_hidden)),
            ("backbone_b1", (c.backbone_hidden,)),
            ("backbone_w2", (c.backbone_hidden, c.backbone_out)),
            ("backbone_b2", (c.backbone_out,)),
            ("w_pair", (c.backbone_out, 1)),
            ("b_pair", (1,)),
            ("w_point", (c.backbone_out, 1)),
            ("b_point", (1,)),
            ("tau", (1,)),
        ]
        total = sum(int(np.prod(s)) for _, s in self._shapes)
        self.flat = np.zeros(total, dtype=self.dtype)
        self.flat_grad = np.zeros(total, dtype=self.dtype)

        self._tensors: dict[str, nm.Tensor] = {}
        offset = 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            t = nm.Tensor(self.flat[offset:offset + n].reshape(shape), requires_grad=True)
            t.grad = self.flat_grad[offset:offset + n].reshape(shape)
            self._tensors[name] = t
            offset += n

        if init:
            self._initialize(seed)

    def _initialize(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
        embeds = ("model_id", "name_tokens", "dataset_id", "task", "metric", "size", "family")
        for name in embeds:
            t = self._tensors[name]
            t.data[...] = rng.normal(0.0, self.EMBED_INIT_STD, size=t.data.shape)
        for name in ("prior_w1", "prior_w2", "backbone_w1", "backbone_w2", "w_pair", "w_point"):
            t = self._tensors[name]
            fan_in = t.data.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            t.data[...] = rng.uniform(-bound, bound, size=t.data.shape)
        # biases stay zero
        self._tensors["tau"].data[...] = self.config.tau_init

    def __getattr__(self, name: str) -> nm.Tensor:
        tensors = object.__getattribute__(self, "_tensors")
        if name in tensors:
            return tensors[name]
        raise AttributeError(name)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self._shapes]

    def tensor(self, name: str) -> nm.Tensor:
        return self._tensors[name]

    def tensors(self) -> list[nm.Tensor]:
        return [self._tensors[n] for n, _ in self._shapes]

    @property
    def n_params(self) -> int:
        return self.flat.size

    def zero_grads(self) -> None:
        self.flat_grad[...] = 0.0

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.config, self.vocab, dtype=self.dtype, init=False)
        out.flat[...] = self.flat
        return out

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(self.config, self.vocab, dtype=dtype, init=False)
        out.flat[...] = self.flat.astype(dtype)
        return out

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self._tensors[name].data) for name, _ in self._shapes]
