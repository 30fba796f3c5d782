"""Binary checkpoints: model parameters, run metadata, RNG and optimiser state.

Layout (little-endian)::

    b"HPLT" | version u32 = 1
    config_len u32 | config_len bytes of UTF-8 "key=value\\n" lines
    rng: state_hi u64 | state_lo u64 | inc_hi u64 | inc_lo u64   (PCG64)
    tensor_count u32
    tensor_count x ( name_len u16 | name | rank u8 | dims u32 x rank | float32 payload )

Optimiser moments are stored as ordinary tensors named ``optim.m.<param>`` and
``optim.v.<param>``; the optimiser step counter lives in the config block.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, format_config, parse_config_text
from .errors import FormatError, VersionError

MAGIC = b"HPLT"
VERSION = 1
_MASK64 = (1 << 64) - 1
_META_KEYS = ("step", "optim_step", "optimizer", "tasks", "aliases")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    rng_state: dict = None
    optimizer: str = "sgd"
    optim_step: int = 0
    optim_tensors: dict = field(default_factory=dict)
    tasks: list = field(default_factory=list)
    aliases: dict = field(default_factory=dict)

    def model(self):
        from .model import HyperPELT
        m = HyperPELT(self.config, self.params)
        m.task_names = list(self.tasks)
        m.task_aliases = dict(self.aliases)
        return m

    def rng(self):
        gen = np.random.Generator(np.random.PCG64())
        if self.rng_state is not None:
            gen.bit_generator.state = self.rng_state
        return gen


def _rng_words(state):
    if state is None:
        return (0, 0, 0, 0)
    if state.get("bit_generator") != "PCG64":
        raise FormatError(f"checkpoint: only PCG64 state can be stored, got {state.get('bit_generator')}")
    s, inc = state["state"]["state"], state["state"]["inc"]
    return (s >> 64, s & _MASK64, inc >> 64, inc & _MASK64)


def _rng_state(words):
    if words == (0, 0, 0, 0):
        return None
    return {"bit_generator": "PCG64",
            "state": {"state": (words[0] << 64) | words[1], "inc": (words[2] << 64) | words[3]},
            "has_uint32": 0, "uinteger": 0}


def from_trainer(trainer):
    model = trainer.model
    return Checkpoint(
        config=model.config, params=model.state(), step=trainer.step,
        rng_state=trainer.rng.bit_generator.state, optimizer=trainer.optimizer.name,
        optim_step=trainer.optimizer.t, optim_tensors=trainer.optimizer.state_tensors(),
        tasks=list(getattr(model, "task_names", []) or []),
        aliases=dict(getattr(model, "task_aliases", {}) or {}))


def from_model(model, step=0):
    return Checkpoint(config=model.config, params=model.state(), step=step,
                      tasks=list(getattr(model, "task_names", []) or []),
                      aliases=dict(getattr(model, "task_aliases", {}) or {}))


def save_checkpoint(path, ckpt):
    meta = format_config(ckpt.config)
    meta += (f"step = {ckpt.step}\noptim_step = {ckpt.optim_step}\n"
             f"optimizer = {ckpt.optimizer}\ntasks = {','.join(ckpt.tasks)}\n"
             f"aliases = {','.join(f'{k}:{v}' for k, v in sorted(ckpt.aliases.items()))}\n")
    blob = meta.encode("utf-8")
    tensors = dict(ckpt.params)
    tensors.update(ckpt.optim_tensors)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<4Q", *_rng_words(ckpt.rng_state)), struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint: truncated {what} at byte offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"checkpoint: bad magic {magic!r} at byte offset 0")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"checkpoint: unsupported version {version} (expected {VERSION})")
    (n,) = r.unpack("<I", "config length")
    try:
        text = r.take(n, "config block").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"checkpoint: config block is not UTF-8 ({exc})") from exc
    meta, model_lines = {}, []
    for line in text.splitlines():
        key = line.split("=", 1)[0].strip()
        if key in _META_KEYS:
            meta[key] = line.split("=", 1)[1].strip()
        else:
            model_lines.append(line)
    config, _ = parse_config_text("\n".join(model_lines))
    words = r.unpack("<4Q", "rng state")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H", "tensor name length")
        name = r.take(ln, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        raw = r.take(4 * size, f"payload of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError(f"checkpoint: trailing bytes at byte offset {r.pos}")
    optim = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    params = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    aliases = {}
    for item in filter(None, meta.get("aliases", "").split(",")):
        k, v = item.split(":")
        aliases[k] = int(v)
    return Checkpoint(
        config=config, params=params, step=int(meta.get("step", 0)),
        rng_state=_rng_state(words), optimizer=meta.get("optimizer", "sgd"),
        optim_step=int(meta.get("optim_step", 0)), optim_tensors=optim,
        tasks=[t for t in meta.get("tasks", "").split(",") if t], aliases=aliases)


def resume_trainer(ckpt, plan, corpora, vocab=None):
    """Rebuild a :class:`~hyperpelt.trainer.Trainer` that continues bit-exactly."""
    from .trainer import Trainer
    model = ckpt.model()
    trainer = Trainer(model, plan, corpora, vocab, step=ckpt.step)
    if ckpt.rng_state is not None:
        trainer.rng.bit_generator.state = ckpt.rng_state
    trainer.optimizer.load_state(ckpt.optim_tensors, ckpt.optim_step)
    return trainer
