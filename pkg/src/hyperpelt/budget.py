"""Trainable-parameter accounting: closed-form rows, corrected variants, introspection.

Closed-form rows are the usual per-method count formulas, where one
"layer" means one encoder layer plus one decoder layer, with three attention
blocks and two feed-forward blocks per layer.  The corrected variants count
exactly what :class:`~hyperpelt.model.HyperPELT` allocates and are checked
against introspection of a live model.
"""

from dataclasses import dataclass, field

import numpy as np

from .backbone import ATTN_KINDS, BLOCK_KINDS
from .errors import UnknownNameError
from .model import freeze_mask, is_backbone, is_layernorm

B_ATTN = 3
B_FFN = 2
METHODS = ("prompt", "prefix", "adapter", "mam", "hyperformer", "hyperprefix", "hyperpelt")
# modes whose corrected variant mirrors a closed-form row
_MODE_OF = {"hyperprefix": "hyperprefix", "hyperpelt": "hyperpelt"}


@dataclass
class ClosedForm:
    method: str
    formula: int
    corrected: int = None
    flags: list = field(default_factory=list)
    repaired: int = None   # formula with its evident typo fixed; else equals formula

    def __post_init__(self):
        if self.repaired is None:
            self.repaired = self.formula

    @property
    def differs(self):
        return self.corrected is not None and self.corrected != self.formula


@dataclass
class ParamReport:
    method: str
    closed_form: int
    introspected: int
    per_task: float
    fraction: float          # per-task count / backbone total
    fraction_with_new: float  # per-task count / (backbone + all new parameters)
    notes: list = field(default_factory=list)


def closed_form_count(method, config):
    """Evaluate the closed-form row for ``method`` (and the corrected variant where one exists)."""
    n, d, L = config.prefix_len, config.d_model, config.n_layers
    dt, dim, di, dm = config.d_task, config.d_hyper_mid, config.d_hyper, config.d_adapter
    if method == "prompt":
        return ClosedForm(method, n * d)
    if method == "prefix":
        return ClosedForm(method, n * d + (1 + 2 * L) * dm * d * B_ATTN)
    if method == "adapter":
        return ClosedForm(method, 2 * dm * d * (B_ATTN + B_FFN) * L)
    if method == "mam":
        return ClosedForm(method, n * d + (1 + 2 * L) * dm * d * B_ATTN + 2 * dm * d * B_FFN * L)
    if method == "hyperformer":
        return ClosedForm(method, (n + B_ATTN + B_FFN + L) * dt + dt * dim + dim * di + 2 * di * dm * d)
    repaired = None
    if method == "hyperprefix":
        formula = (n + B_ATTN + L) * dt + dt * dim + dim * di * di * d
        repaired = (n + B_ATTN + L) * dt + dt * dim + dim * di + di * d
    elif method == "hyperpelt":
        formula = ((n + B_ATTN + B_FFN + L) * dt + dt * dim + dim * di
                   + 2 * di * d + 2 * di * dm * d)
    else:
        raise UnknownNameError(f"unknown method {method!r}; expected one of {METHODS}")
    corrected = corrected_count(_MODE_OF[method], config)
    flags = _flags(method, config)
    return ClosedForm(method, formula, corrected, flags, repaired)


def _flags(method, config):
    flags = [
        "projector input is the 3*d_task concatenation (closed form: d_task)",
        "projector biases counted",
        "layer and block embeddings have N rows each (closed form: one row each)",
        "backbone layer norms counted",
    ]
    if method == "hyperprefix":
        flags.insert(0, "product d_I_mid*d_I*d_I*d repaired to d_I_mid*d_I + d_I*d")
        flags.insert(1, "prefix map has separate key and value heads: 2*d_I*d")
    if method == "hyperpelt":
        flags.append("per-site adapter gates and adapter layer norms counted")
    return flags


def backbone_count(config):
    """Element count of the frozen encoder-decoder built by ``init_backbone``."""
    d, L, h, ff = config.d_model, config.n_layers, config.n_heads, config.d_ff
    ln = 2 * d
    attn = 4 * d * d
    rel = config.rel_buckets * h
    ffn = 2 * d * ff
    enc = 2 * ln + attn + rel + ffn
    dec = 3 * ln + 2 * attn + rel + ffn
    return config.vocab_size * d + L * (enc + dec) + 2 * ln


def backbone_layernorm_count(config):
    return (5 * config.n_layers + 2) * 2 * config.d_model


def _projector(config):
    return 3 * config.d_task * config.d_hyper_mid + config.d_hyper_mid \
        + config.d_hyper_mid * config.d_hyper + config.d_hyper


def corrected_count(mode, config):
    """Trainable element count of a ``mode`` model under its freeze mask."""
    n, dt, L, d = config.prefix_len, config.d_task, config.n_layers, config.d_model
    di, dm = config.d_hyper, config.d_adapter
    if mode == "full":
        return backbone_count(config)
    if mode == "frozen":
        return 0
    if mode == "taskembed":
        return n * dt
    if mode not in ("hyperprefix", "hyperpelt", "vl_hyperpelt"):
        raise UnknownNameError(f"unknown mode {mode!r}")
    kinds = len(ATTN_KINDS) if mode == "hyperprefix" else len(BLOCK_KINDS)
    total = (config.n_tasks + kinds + L) * n * dt + backbone_layernorm_count(config)
    paths = 2 if mode == "vl_hyperpelt" else 1
    per_path = _projector(config) + 2 * di * d
    if mode != "hyperprefix":
        per_path += 2 * di * d * dm + 2 * L + 2 * L * 2 * d
    total += paths * per_path
    if mode == "vl_hyperpelt":
        total += config.d_visual * dt
    return total


def _group(name):
    if name.startswith("visual.") or "visual_" in name or name.startswith("adapter.visual."):
        return "visual"
    if is_layernorm(name):
        return "layernorm"
    if is_backbone(name):
        return "backbone"
    if "_emb." in name:
        return "embeddings"
    if "_projector." in name:
        return "projectors"
    if name.endswith(".lambda"):
        return "lambda"
    return "hypernets"


GROUPS = ("backbone", "layernorm", "embeddings", "projectors", "hypernets", "lambda", "visual")


def introspect_count(model, mask=None):
    """``(total, {group: count})`` over parameters flagged trainable by ``mask``."""
    mask = freeze_mask(model) if mask is None else mask
    groups = dict.fromkeys(GROUPS, 0)
    for name, t in model.params.items():
        if mask[name]:
            groups[_group(name)] += int(t.data.size)
    return sum(groups.values()), groups


def _split_counts(method, config):
    """(task-specific, shared) split of a closed-form row for per-task accounting."""
    cf = closed_form_count(method, config)
    if method in ("hyperformer", "hyperprefix", "hyperpelt"):
        own = config.prefix_len * config.d_task
        return cf, own, cf.repaired - own
    return cf, cf.repaired, 0


def compare_methods(config, methods=METHODS, introspect=None):
    """One :class:`ParamReport` per method.

    Per-task count = task-specific part + shared part / n_tasks.  For the
    hyper rows the task embedding is task-specific and the rest is shared;
    the other rows are whole per-task copies.  ``introspect`` maps a method
    name to an introspected count (only feasible on small configs).
    """
    introspect = introspect or {}
    base = backbone_count(config)
    rows = []
    for m in methods:
        cf, own, shared = _split_counts(m, config)
        per_task = own + shared / config.n_tasks
        new_total = cf.repaired if not shared else own * config.n_tasks + shared
        rows.append(ParamReport(
            method=m, closed_form=cf.formula, introspected=introspect.get(m),
            per_task=per_task, fraction=per_task / base,
            fraction_with_new=per_task / (base + new_total),
            notes=_notes(cf)))
    return rows


def _notes(cf):
    notes = []
    if cf.repaired != cf.formula:
        notes.append(f"closed form evaluates to {cf.formula}; per-task figures use {cf.repaired}")
    if cf.differs:
        notes.append(f"corrected={cf.corrected}")
        notes += cf.flags
    return notes


def introspect_small(config):
    """Introspected counts for the modes that have a live model (small configs only)."""
    from .model import HyperPELT
    out = {}
    for m in ("hyperprefix", "hyperpelt"):
        model = HyperPELT(config.replace(mode=m))
        out[m] = introspect_count(model)[0]
    return out


def format_table(rows):
    head = ("method", "closed_form", "introspected", "per_task", "fraction", "fraction+new")
    body = [(r.method, str(r.closed_form), "-" if r.introspected is None else str(r.introspected),
             f"{r.per_task:.1f}", f"{100 * r.fraction:.4f}%", f"{100 * r.fraction_with_new:.4f}%")
            for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in [head] + body]
    for r in rows:
        for note in r.notes:
            lines.append(f"  [{r.method}] {note}")
    return "\n".join(lines)


def machine_lines(rows):
    return [f"method={r.method} closed_form={r.closed_form} "
            f"introspected={'' if r.introspected is None else r.introspected} "
            f"fraction={r.fraction:.6g}" for r in rows]


def per_task_ordering(config, order=("hyperprefix", "hyperpelt", "prefix")):
    """True when per-task fractions are strictly increasing along ``order``."""
    rows = {r.method: r.fraction for r in compare_methods(config, order)}
    vals = [rows[m] for m in order]
    return bool(np.all(np.diff(vals) > 0)), rows
