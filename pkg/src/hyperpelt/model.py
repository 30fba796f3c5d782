"""The frozen backbone wired to hyper-embeddings and hypernetworks.

Parameter names are flat dotted strings.  The backbone owns ``shared.*``,
``encoder.*`` and ``decoder.*``; tuning modules own ``hyper.*``,
``adapter.*`` and ``visual.*``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import tensor as T
from .backbone import ATTN_KINDS, BLOCK_KINDS, FFN_KINDS, all_blocks
from .errors import ContractError, UnknownNameError
from .hyperembed import build_hyper_embeddings, init_embeddings, pool_for_adapter
from .hypernets import (AdapterHypernet, AdapterWeights, PrefixHypernet,
                        generate_adapter_weights, generate_prefix)
from .visual import (VisualProjection, init_visual_projection, init_visual_projector,
                     merge_prefixes, project_visual)

# mode -> (uses prefixes, uses adapters, uses visual path)
_MODE_PARTS = {
    "full": (False, False, False),
    "hyperprefix": (True, False, False),
    "hyperpelt": (True, True, False),
    "taskembed": (True, True, False),
    "vl_hyperpelt": (True, True, True),
}


def _param(arr, name):
    return T.Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True, name=name)


def _hyper_init(rng, d_in, d_out):
    return rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))


@dataclass
class Batch:
    """One single-task batch of padded token ids (and image grids for V&L tasks)."""

    task_index: int
    inputs: np.ndarray
    targets: np.ndarray
    visual: np.ndarray = None   # (B, N, d_visual)

    def __len__(self):
        return self.inputs.shape[0]


class HyperPELT:
    def __init__(self, config, params=None):
        self.config = config
        self.uses_prefix, self.uses_adapter, self.uses_visual = _MODE_PARTS[config.mode]
        fresh = self._init_params(config)
        if params is not None:
            if set(params) != set(fresh):
                missing = sorted(set(fresh) - set(params))
                extra = sorted(set(params) - set(fresh))
                raise ContractError(f"parameter set mismatch: missing {missing}, extra {extra}")
            for name, t in fresh.items():
                arr = np.asarray(params[name], dtype=np.float32)
                if arr.shape != t.shape:
                    raise ContractError(f"parameter {name}: shape {arr.shape} != {t.shape}")
                t.data = arr.copy()
        self.params = fresh
        self._bind()

    # ------------------------------------------------------------------
    # construction

    def _init_params(self, cfg):
        seed = cfg.seed
        params = {}
        for name, arr in bb.init_backbone(cfg, np.random.default_rng([seed, 0])).items():
            params[name] = _param(arr, name)
        if not self.uses_prefix:
            return params
        kinds = BLOCK_KINDS if self.uses_adapter else ATTN_KINDS
        bank, projector = init_embeddings(cfg, seed, kinds)
        params.update(bank.named())
        params.update(projector.named("hyper.text_projector"))
        self._add_hypernets(params, "text", np.random.default_rng([seed, 2]))
        if self.uses_visual:
            rng = np.random.default_rng([seed, 3])
            params["visual.proj"] = init_visual_projection(cfg, rng).weight
            params.update(init_visual_projector(cfg, rng).named("hyper.visual_projector"))
            self._add_hypernets(params, "visual", rng)
        return params

    def _add_hypernets(self, params, which, rng):
        cfg = self.config
        d, m, di = cfg.d_model, cfg.d_adapter, cfg.d_hyper
        for head in ("key", "value"):
            name = f"hyper.{which}_prefix.{head}"
            params[name] = _param(_hyper_init(rng, di, d), name)
        if not self.uses_adapter:
            return
        for part in ("up", "down"):
            name = f"hyper.{which}_adapter.{part}"
            params[name] = _param(_hyper_init(rng, di, d * m), name)
        for site in self.ffn_sites:
            base = f"adapter.{which}.{site}"
            params[f"{base}.lambda"] = _param([cfg.lambda_init], f"{base}.lambda")
            params[f"{base}.ln.scale"] = _param(np.ones(d), f"{base}.ln.scale")
            params[f"{base}.ln.bias"] = _param(np.zeros(d), f"{base}.ln.bias")

    def _bind(self):
        from .hyperembed import EmbeddingBank, ProjectorMLP
        p, cfg = self.params, self.config
        if not self.uses_prefix:
            return
        kinds = BLOCK_KINDS if self.uses_adapter else ATTN_KINDS
        self.bank = EmbeddingBank(
            tasks=[p[f"hyper.task_emb.{i}"] for i in range(cfg.n_tasks)],
            layers=[p[f"hyper.layer_emb.{i}"] for i in range(cfg.n_layers)],
            blocks={k: p[f"hyper.block_emb.{k}"] for k in kinds},
        )
        self.hyper = {}
        for which in ("text", "visual") if self.uses_visual else ("text",):
            proj = ProjectorMLP(*(p[f"hyper.{which}_projector.{n}"] for n in ("w1", "b1", "w2", "b2")))
            prefix = PrefixHypernet(p[f"hyper.{which}_prefix.key"], p[f"hyper.{which}_prefix.value"])
            adapter = None
            if self.uses_adapter:
                adapter = AdapterHypernet(p[f"hyper.{which}_adapter.up"],
                                          p[f"hyper.{which}_adapter.down"],
                                          cfg.d_model, cfg.d_adapter)
            self.hyper[which] = (proj, prefix, adapter)

    @classmethod
    def init(cls, config):
        return cls(config)

    @property
    def attn_sites(self):
        return all_blocks(self.config.n_layers, ATTN_KINDS) if self.uses_prefix else []

    @property
    def ffn_sites(self):
        return all_blocks(self.config.n_layers, FFN_KINDS) if self.uses_adapter else []

    def tensors(self):
        return list(self.params.values())

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------------
    # generation

    def _generate(self, which, source):
        """Prefix and adapter packs for every site from one source (task or images)."""
        projector, prefix_net, adapter_net = self.hyper[which]
        attn, ffn = self.attn_sites, self.ffn_sites
        hyper = build_hyper_embeddings(self.bank, projector, source, attn + ffn)
        per_example = source.ndim == 3
        na = len(attn)

        def site(t, s):
            return t[:, s] if per_example else t[s]

        head = hyper[:, :na] if per_example else hyper[:na]
        p_k, p_v = generate_prefix(prefix_net, head)
        prefix = {b: (site(p_k, s), site(p_v, s)) for s, b in enumerate(attn)}
        adapters = {}
        if ffn:
            tail = hyper[:, na:] if per_example else hyper[na:]
            up, down = generate_adapter_weights(adapter_net, pool_for_adapter(tail))
            for s, b in enumerate(ffn):
                base = f"adapter.{which}.{b}"
                adapters[b] = AdapterWeights(
                    up=site(up, s), down=site(down, s), lam=self.params[f"{base}.lambda"],
                    ln_scale=self.params[f"{base}.ln.scale"],
                    ln_bias=self.params[f"{base}.ln.bias"], eps=self.config.ln_eps)
        return prefix, adapters

    def generate(self, task_index, visual=None):
        """Prefix pack and adapter lists conditioned on a task (and optional image grids)."""
        if not self.uses_prefix:
            if visual is not None:
                raise ContractError(f"mode {self.config.mode} has no visual path")
            return {}, {}
        prefix, adapters = self._generate("text", self.bank.task(task_index))
        adapters = {b: [a] for b, a in adapters.items()}
        if visual is not None:
            if not self.uses_visual:
                raise ContractError(f"mode {self.config.mode} has no visual path")
            grid = visual if isinstance(visual, T.Tensor) else T.Tensor(
                np.asarray(visual, dtype=np.float32))
            projected = project_visual(VisualProjection(self.params["visual.proj"]), grid,
                                       self.config.prefix_len)
            vprefix, vadapters = self._generate("visual", projected)
            prefix = {b: merge_prefixes(prefix[b], vprefix[b]) for b in prefix}
            for b, a in vadapters.items():
                adapters[b].append(a)
        return prefix, adapters

    # ------------------------------------------------------------------

    def forward(self, batch):
        """Logits and mean token cross-entropy for a :class:`Batch`."""
        prefix, adapters = self.generate(batch.task_index, batch.visual)
        return bb.forward_seq2seq(self.config, self.params, batch.inputs, batch.targets,
                                  prefix, adapters)

    def loss(self, batch):
        return self.forward(batch)[1]

    def decode(self, task_index, inputs, visual=None, max_len=8):
        with T.no_grad():
            prefix, adapters = self.generate(task_index, visual)
            return bb.greedy_decode(self.config, self.params, inputs, prefix, adapters, max_len)


# --------------------------------------------------------------------------
# freeze masks

def is_layernorm(name):
    return ".ln_" in name or ".final_ln." in name or ".ln." in name


def is_backbone(name):
    return name.startswith(("shared.", "encoder.", "decoder."))


def freeze_mask(model, mode=None, target_task=None):
    """Trainable flag per parameter name for ``mode`` (defaults to the model's)."""
    mode = mode or model.config.mode
    names = list(model.params)
    if mode == "full":
        return {n: True for n in names}
    if mode == "frozen":
        return {n: False for n in names}
    if mode == "taskembed":
        if target_task is None:
            target_task = model.config.n_tasks - 1
        key = f"hyper.task_emb.{target_task}"
        if key not in model.params:
            raise UnknownNameError(f"no task embedding {target_task}")
        return {n: n == key for n in names}
    if mode in ("hyperprefix", "hyperpelt", "vl_hyperpelt"):
        return {n: (not is_backbone(n)) or is_layernorm(n) for n in names}
    raise UnknownNameError(f"unknown mode {mode!r}")
