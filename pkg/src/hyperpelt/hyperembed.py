"""Task, layer-id and block-type embeddings and the projector MLP.

A hyper-embedding for one insertion site is obtained by concatenating (along
features) the source rows -- a task embedding or a projected image -- with the
layer-id and block-type rows of that site, and passing the result through a
two-layer ReLU MLP: ``(N, 3*d_task) -> (N, d_hyper)``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BLOCK_KINDS, BlockId
from .errors import DimensionError, UnknownNameError

EMBED_STD = 0.02
PROJECTOR_BIAS_INIT = 0.1


@dataclass
class EmbeddingBank:
    tasks: list       # n_tasks tensors, each (N, d_task)
    layers: list      # n_layers tensors, each (N, d_task)
    blocks: dict      # block kind -> (N, d_task)

    @property
    def prefix_len(self):
        return self.layers[0].shape[0]

    @property
    def d_task(self):
        return self.layers[0].shape[1]

    def task(self, index):
        if not 0 <= index < len(self.tasks):
            raise UnknownNameError(f"task index {index} outside [0, {len(self.tasks)})")
        return self.tasks[index]

    def named(self):
        out = {f"hyper.task_emb.{i}": t for i, t in enumerate(self.tasks)}
        out.update({f"hyper.layer_emb.{i}": t for i, t in enumerate(self.layers)})
        out.update({f"hyper.block_emb.{k}": t for k, t in self.blocks.items()})
        return out


@dataclass
class ProjectorMLP:
    w1: T.Tensor   # (3*d_task, d_hyper_mid)
    b1: T.Tensor
    w2: T.Tensor   # (d_hyper_mid, d_hyper)
    b2: T.Tensor

    def __call__(self, x):
        h = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def named(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class HyperEmbedding:
    value: T.Tensor   # (N, d_hyper), or (B, N, d_hyper) for per-image sources
    source: object
    target: BlockId


def _param(arr, name):
    return T.Tensor(arr.astype(np.float32), requires_grad=True, name=name)


def init_projector(config, rng, prefix):
    d_in = 3 * config.d_task
    return ProjectorMLP(
        w1=_param(rng.normal(0, 1 / math.sqrt(d_in), (d_in, config.d_hyper_mid)), f"{prefix}.w1"),
        b1=_param(np.full(config.d_hyper_mid, PROJECTOR_BIAS_INIT), f"{prefix}.b1"),
        w2=_param(rng.normal(0, 1 / math.sqrt(config.d_hyper_mid),
                             (config.d_hyper_mid, config.d_hyper)), f"{prefix}.w2"),
        b2=_param(np.zeros(config.d_hyper), f"{prefix}.b2"),
    )


def init_embeddings(config, seed, block_kinds=BLOCK_KINDS):
    """Seeded embedding bank (N(0, 0.02^2) entries) and task projector."""
    rng = np.random.default_rng([seed, 1])
    shape = (config.prefix_len, config.d_task)

    def emb(name):
        return _param(rng.normal(0.0, EMBED_STD, shape), name)

    bank = EmbeddingBank(
        tasks=[emb(f"hyper.task_emb.{i}") for i in range(config.n_tasks)],
        layers=[emb(f"hyper.layer_emb.{i}") for i in range(config.n_layers)],
        blocks={k: emb(f"hyper.block_emb.{k}") for k in block_kinds},
    )
    return bank, init_projector(config, rng, "hyper.text_projector")


def _site_rows(bank, blocks):
    """Stack layer and block rows for each site: two (S, N, d_task) tensors."""
    n, dt = bank.prefix_len, bank.d_task
    for b in blocks:
        if not 0 <= b.layer < len(bank.layers):
            raise UnknownNameError(f"layer index {b.layer} outside [0, {len(bank.layers)})")
        if b.kind not in bank.blocks:
            raise UnknownNameError(f"block kind {b.kind!r} not in embedding bank")
    kinds = list(bank.blocks)
    layer_table = T.concat([T.reshape(t, (1, n * dt)) for t in bank.layers], axis=0)
    kind_table = T.concat([T.reshape(bank.blocks[k], (1, n * dt)) for k in kinds], axis=0)
    layer_rows = T.embedding(layer_table, np.array([b.layer for b in blocks]))
    kind_rows = T.embedding(kind_table, np.array([kinds.index(b.kind) for b in blocks]))
    return (T.reshape(layer_rows, (len(blocks), n, dt)),
            T.reshape(kind_rows, (len(blocks), n, dt)))


def build_hyper_embeddings(bank, projector, source, blocks):
    """Hyper-embeddings for many sites at once.

    source: ``(N, d_task)`` -> result ``(S, N, d_hyper)``; or ``(B, N, d_task)``
    for per-example sources -> ``(B, S, N, d_hyper)``.
    """
    n, dt = bank.prefix_len, bank.d_task
    if source.shape[-2:] != (n, dt):
        raise DimensionError(f"hyper-embedding: source {source.shape} should end in {(n, dt)}")
    layer_rows, kind_rows = _site_rows(bank, blocks)
    s = len(blocks)
    if source.ndim == 2:
        full = (s, n, dt)
        src = T.broadcast_to(T.reshape(source, (1, n, dt)), full)
    else:
        b = source.shape[0]
        full = (b, s, n, dt)
        src = T.broadcast_to(T.reshape(source, (b, 1, n, dt)), full)
        layer_rows = T.broadcast_to(layer_rows, full)
        kind_rows = T.broadcast_to(kind_rows, full)
    return projector(T.concat([src, layer_rows, kind_rows], axis=-1))


def build_hyper_embedding(bank, projector, source_embedding, block, source=None):
    """Hyper-embedding ``I`` (N x d_hyper) for a single site."""
    value = build_hyper_embeddings(bank, projector, source_embedding, [block])
    value = value[0] if source_embedding.ndim == 2 else value[:, 0]
    return HyperEmbedding(value=value, source=source, target=block)


def pool_for_adapter(hyper_embedding):
    """Mean over the prefix axis: ``(..., N, d_hyper) -> (..., d_hyper)``."""
    value = getattr(hyper_embedding, "value", hyper_embedding)
    pooled = T.adaptive_mean_pool(value, 1, axis=-2)
    return T.reshape(pooled, value.shape[:-2] + (value.shape[-1],))
