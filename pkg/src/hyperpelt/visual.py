"""Visual conditioning: grid features -> visual hyper-embeddings -> prefixes/adapters.

The image encoder itself is frozen and out of the loop; features come from
``.hpvf`` files or a seeded synthetic generator.

HPVF layout (little-endian)::

    b"HPVF" | version u32 = 1 | count u32 | n_grid u32 | d_visual u32
    count x ( image_id u64 | n_grid * d_visual float32 )
"""

import math
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, VersionError
from .hyperembed import build_hyper_embeddings, HyperEmbedding, init_projector

MAGIC = b"HPVF"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_ID = struct.Struct("<Q")


@dataclass
class VisualFeatures:
    image_id: int
    grid: np.ndarray   # (n_grid, d_visual) float32


@dataclass
class VisualProjection:
    """Row-wise linear map from visual width to task-embedding width."""

    weight: T.Tensor   # (d_visual, d_task)


def init_visual_projection(config, rng):
    # scaled so projected rows sit at the task-embedding scale
    std = 0.02 / math.sqrt(config.d_visual)
    w = rng.normal(0.0, std, (config.d_visual, config.d_task)).astype(np.float32)
    return VisualProjection(T.Tensor(w, requires_grad=True, name="visual.proj"))


def init_visual_projector(config, rng):
    return init_projector(config, rng, "hyper.visual_projector")


def project_visual(proj, feats, prefix_len=None):
    """``(N, d_v)`` or ``(B, N, d_v)`` features -> same leading shape with width d_task."""
    grid = feats.grid if isinstance(feats, VisualFeatures) else feats
    grid = grid if isinstance(grid, T.Tensor) else T.Tensor(np.asarray(grid, dtype=np.float32))
    d_v = proj.weight.shape[0]
    if grid.shape[-1] != d_v:
        raise DimensionError(f"project_visual: feature width {grid.shape[-1]} != {d_v}")
    if prefix_len is not None and grid.shape[-2] != prefix_len:
        raise DimensionError(
            f"project_visual: grid has {grid.shape[-2]} rows, prefix length is {prefix_len}")
    return T.matmul(grid, proj.weight)


def build_visual_hyper_embedding(bank, visual_projector, projected, block, source=None):
    """Same pipeline as the task hyper-embedding, through the visual projector."""
    value = build_hyper_embeddings(bank, visual_projector, projected, [block])
    value = value[0] if projected.ndim == 2 else value[:, 0]
    return HyperEmbedding(value=value, source=source, target=block)


def merge_prefixes(text, visual):
    """Append visual prefixes after the text ones along the prefix axis.

    A text pack shared by the batch is broadcast against a per-example visual
    pack.
    """
    out = []
    for t, v in zip(text, visual):
        if t.shape[-1] != v.shape[-1]:
            raise DimensionError(f"merge_prefixes: widths {t.shape[-1]} and {v.shape[-1]}")
        if t.ndim == 2 and v.ndim == 3:
            t = T.broadcast_to(t, (v.shape[0],) + t.shape)
        elif t.ndim == 3 and v.ndim == 2:
            v = T.broadcast_to(v, (t.shape[0],) + v.shape)
        out.append(T.concat([t, v], axis=-2))
    return tuple(out)


# --------------------------------------------------------------------------
# feature sources

def synth_visual_features(image_id, seed, n_grid=4, d_visual=16):
    """Standard-normal grid drawn from a generator keyed on (seed, image_id)."""
    rng = np.random.default_rng([int(seed), int(image_id), 0x5EED])
    return VisualFeatures(int(image_id),
                          rng.standard_normal((n_grid, d_visual)).astype(np.float32))


def write_visual_features(path, features):
    features = list(features)
    if not features:
        n_grid = d_visual = 0
    else:
        n_grid, d_visual = features[0].grid.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(features), n_grid, d_visual))
        for f in features:
            if f.grid.shape != (n_grid, d_visual):
                raise DimensionError(
                    f"write_visual_features: grid {f.grid.shape} != {(n_grid, d_visual)}")
            fh.write(_ID.pack(f.image_id))
            fh.write(np.ascontiguousarray(f.grid, dtype="<f4").tobytes())


def iter_visual_features(path):
    """Stream ``VisualFeatures`` records from an HPVF file."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"HPVF: truncated header at byte offset {len(head)}")
        magic, version, count, n_grid, d_visual = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"HPVF: bad magic {magic!r} at byte offset 0")
        if version != VERSION:
            raise VersionError(f"HPVF: unsupported version {version} at byte offset 4")
        payload = n_grid * d_visual * 4
        offset = _HEADER.size
        for _ in range(count):
            raw = fh.read(_ID.size + payload)
            if len(raw) < _ID.size + payload:
                raise FormatError(
                    f"HPVF: truncated record at byte offset {offset + len(raw)} "
                    f"(expected {_ID.size + payload} bytes from {offset})")
            (image_id,) = _ID.unpack_from(raw)
            grid = np.frombuffer(raw, dtype="<f4", offset=_ID.size).reshape(n_grid, d_visual)
            yield VisualFeatures(image_id, grid.astype(np.float32))
            offset += len(raw)
        if fh.read(1):
            raise FormatError(f"HPVF: trailing bytes at byte offset {offset}")


def load_visual_features(path):
    return list(iter_visual_features(path))


def prefetch(iterable, maxsize=8):
    """Iterate ``iterable`` on a background thread through a bounded queue.

    The producer blocks when ``maxsize`` items are waiting; exceptions raised
    by the producer are re-raised in the consumer.
    """
    q = queue.Queue(maxsize=maxsize)
    done = object()

    def produce():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # forwarded to the consumer
            q.put(exc)
        q.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    while True:
        item = q.get()
        if item is done:
            break
        if isinstance(item, BaseException):
            raise item
        yield item
    worker.join()
