"""Model configuration and the ``key = value`` config file format."""

import dataclasses
from dataclasses import dataclass

from .errors import ContractError, FormatError

MODES = ("full", "hyperprefix", "hyperpelt", "taskembed", "vl_hyperpelt")


@dataclass(frozen=True)
class ModelConfig:
    """Every dimensional hyperparameter of the backbone and the tuning modules.

    ``n_layers`` counts layer pairs: one encoder layer plus one decoder layer.
    """

    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    vocab_size: int = 64
    prefix_len: int = 4
    d_task: int = 16
    d_hyper_mid: int = 12
    d_hyper: int = 8
    d_adapter: int = 8
    d_visual: int = 16
    n_tasks: int = 3
    mode: str = "hyperpelt"
    seed: int = 0
    rel_buckets: int = 8
    rel_max_distance: int = 16
    ln_eps: float = 1e-6
    lambda_init: float = 0.1
    abs_positions: bool = False   # fixed sinusoidal positions added to input embeddings

    def __post_init__(self):
        ints = ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "prefix_len",
                "d_task", "d_hyper_mid", "d_hyper", "d_adapter", "d_visual", "n_tasks",
                "rel_buckets", "rel_max_distance")
        for name in ints:
            if getattr(self, name) < 1:
                raise ContractError(f"config: {name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ContractError(
                f"config: d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_adapter > self.d_model:
            raise ContractError("config: d_adapter must not exceed d_model")
        if self.mode not in MODES:
            raise ContractError(f"config: mode must be one of {MODES}, got {self.mode!r}")
        if self.ln_eps <= 0:
            raise ContractError("config: ln_eps must be positive")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    @property
    def visual(self):
        return self.mode == "vl_hyperpelt"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


C1 = ModelConfig()

# full-size shapes, matching configs/t5_base.cfg; only used for parameter accounting
T5_BASE = ModelConfig(n_layers=12, d_model=768, n_heads=12, d_ff=3072, vocab_size=32128,
                      prefix_len=49, d_task=768, d_hyper_mid=128, d_hyper=64, d_adapter=32,
                      d_visual=2048, n_tasks=8, rel_buckets=32, rel_max_distance=128)

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ModelConfig)}

# non-model keys accepted in config files; consumed by the trainer / CLI
TRAIN_KEYS = {
    "learning_rate": float, "batch_size": int, "temperature": float, "steps": int,
    "eval_every": int, "optimizer": str, "tasks": str, "train_seed": int,
}


def _parse_bool(raw):
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def _coerce(key, raw, kind):
    kind = {"int": int, "float": float, "str": str, "bool": bool}.get(kind, kind)
    kind = _parse_bool if kind is bool else kind
    try:
        return kind(raw)
    except ValueError:
        raise FormatError(f"config: bad value for {key}: {raw!r}") from None


def parse_config_text(text, base=C1):
    """Parse ``key = value`` lines into ``(ModelConfig, train_options)``."""
    model_kw, train = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _FIELD_TYPES:
            model_kw[key] = _coerce(key, raw, _FIELD_TYPES[key])
        elif key in TRAIN_KEYS:
            train[key] = _coerce(key, raw, TRAIN_KEYS[key])
        else:
            raise FormatError(f"config line {lineno}: unknown key {key!r}")
    return base.replace(**model_kw), train


def load_config(path, base=C1):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)


def format_config(config, extra=None):
    lines = [f"{k} = {v}" for k, v in config.to_items()]
    lines += [f"{k} = {v}" for k, v in (extra or {}).items()]
    return "\n".join(lines) + "\n"
