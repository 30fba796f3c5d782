"""Multi-task training under a freeze mask, few-shot transfer and evaluation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import strip_eos
from .errors import ContractError, NumericError, UnknownNameError
from .model import Batch, HyperPELT, freeze_mask
from .tasks import desk_vocab, encode_examples

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# task sampling

def task_probabilities(sizes, temperature=2.0):
    """``q_t = p_t^(1/T) / sum p^(1/T)`` with ``p_t = N_t / sum N``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if sizes.size == 0 or sizes.sum() <= 0 or (sizes < 0).any():
        raise ContractError("task sizes must be non-negative with a positive total")
    p = sizes / sizes.sum()
    if temperature == 1:
        return p
    w = p ** (1.0 / temperature)
    return w / w.sum()


def sample_task(plan, rng):
    """Draw a task index with temperature-flattened size proportions."""
    sizes = plan.sizes if isinstance(plan, TrainPlan) else plan
    temperature = plan.temperature if isinstance(plan, TrainPlan) else 2.0
    q = task_probabilities(sizes, temperature)
    return int(np.searchsorted(np.cumsum(q), rng.random(), side="right").clip(0, len(q) - 1))


# --------------------------------------------------------------------------
# optimisers

class SGD:
    name = "sgd"

    def __init__(self, lr):
        self.lr = lr

    def step(self, params, mask):
        for name, p in params.items():
            if mask[name] and p.grad is not None:
                p.data = (p.data - self.lr * p.grad).astype(np.float32)

    def state_tensors(self):
        return {}

    def load_state(self, tensors, step):
        pass

    @property
    def t(self):
        return 0


class Adam:
    """Adam without weight decay; parameters that receive no gradient are never moved."""

    name = "adam"

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, mask):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if not mask[name] or p.grad is None:
                continue
            g = p.grad.astype(np.float32)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * upd).astype(np.float32)

    def state_tensors(self):
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors, step):
        self.t = step
        self.m = {k[len("optim.m."):]: v.copy() for k, v in tensors.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: v.copy() for k, v in tensors.items() if k.startswith("optim.v.")}


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise UnknownNameError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------------------
# steps

def apply_mask(model, mask):
    missing = set(model.params) - set(mask)
    if missing:
        raise ContractError(f"freeze mask does not cover {sorted(missing)[:3]}...")
    for name, t in model.params.items():
        t.requires_grad = bool(mask[name])


def training_step(model, batch, mask, lr=1e-3, optimizer=None):
    """One forward/backward/update; frozen parameters are left untouched."""
    optimizer = optimizer or SGD(lr)
    apply_mask(model, mask)
    model.zero_grad()
    try:
        _, loss = model.forward(batch)
    except NumericError as exc:
        raise NumericError(f"training step on task {batch.task_index}: {exc}") from exc
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"training step on task {batch.task_index}: loss {value}")
    T.backward(loss)
    optimizer.step(model.params, mask)
    model.zero_grad()
    return value


def make_batch(vocab, examples, task_index):
    inputs, targets = encode_examples(vocab, examples)
    visual = None
    if examples and examples[0].image is not None:
        visual = np.stack([e.image.grid for e in examples]).astype(np.float32)
    return Batch(task_index, inputs, targets, visual)


# --------------------------------------------------------------------------
# evaluation

def predict(model, vocab, examples, task_index, batch_size=200, max_len=8):
    preds = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        batch = make_batch(vocab, chunk, task_index)
        out = model.decode(task_index, batch.inputs, batch.visual, max_len=max_len)
        preds += [vocab.decode(strip_eos(o)) for o in out]
    return preds


def evaluate(model, corpora, task, split="val", vocab=None, task_index=None):
    """Exact-match accuracy of ``task`` on ``split``.

    ``corpora`` maps task names to corpora; the model's task slot comes from
    ``task_index`` or the model's own name table.
    """
    if task not in corpora:
        raise UnknownNameError(f"unknown task {task!r}")
    vocab = vocab or desk_vocab()
    if task_index is None:
        task_index = model_task_index(model, task)
    examples = corpora[task].split(split)
    preds = predict(model, vocab, examples, task_index)
    acc = float(np.mean([p == e.target for p, e in zip(preds, examples)])) if examples else 0.0
    return {"task": task, "split": split, "accuracy": acc, "n": len(examples)}


def evaluate_all(model, corpora, tasks, split="val", vocab=None):
    report = {t: evaluate(model, corpora, t, split, vocab)["accuracy"] for t in tasks}
    report["average"] = float(np.mean([report[t] for t in tasks]))
    return report


def model_task_index(model, task):
    names = getattr(model, "task_names", None) or []
    aliases = getattr(model, "task_aliases", {}) or {}
    if task in aliases:
        return aliases[task]
    if task in names:
        return names.index(task)
    raise UnknownNameError(f"model has no task {task!r}")


# --------------------------------------------------------------------------
# plans and the loop

@dataclass
class TrainPlan:
    tasks: list
    sizes: list
    temperature: float = 2.0
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    eval_every: int = 0
    seed: int = 0
    mode: str = "hyperpelt"
    optimizer: str = "sgd"
    target_task: int = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractError("TrainPlan: temperature must be > 0")
        if self.steps < 1:
            raise ContractError("TrainPlan: steps must be >= 1")
        if len(self.tasks) != len(self.sizes):
            raise ContractError("TrainPlan: one size per task")


@dataclass
class Trainer:
    """Owns a model, its optimiser state and the data RNG for one run."""

    model: HyperPELT
    plan: TrainPlan
    corpora: dict
    vocab: object = None
    step: int = 0
    history: list = field(default_factory=list)
    best: tuple = None   # (val average, step, state)

    def __post_init__(self):
        self.vocab = self.vocab or desk_vocab()
        self.rng = np.random.default_rng(self.plan.seed)
        self.optimizer = make_optimizer(self.plan.optimizer, self.plan.learning_rate)
        self.mask = freeze_mask(self.model, self.plan.mode, self.plan.target_task)
        self.model.task_names = list(self.plan.tasks)
        missing = [t for t in self.plan.tasks if t not in self.corpora]
        if missing:
            raise UnknownNameError(f"no corpus for tasks {missing}")

    def next_batch(self):
        ti = sample_task(self.plan, self.rng)
        train = self.corpora[self.plan.tasks[ti]].train
        idx = self.rng.integers(0, len(train), self.plan.batch_size)
        return make_batch(self.vocab, [train[i] for i in idx], self._slot(ti))

    def _slot(self, ti):
        return model_task_index(self.model, self.plan.tasks[ti])

    def train_step(self):
        batch = self.next_batch()
        loss = training_step(self.model, batch, self.mask, self.plan.learning_rate, self.optimizer)
        self.step += 1
        self.history.append(loss)
        return loss

    def run(self, steps=None, callback=None):
        steps = self.plan.steps if steps is None else steps
        for _ in range(steps):
            self.train_step()
            if self.plan.eval_every and self.step % self.plan.eval_every == 0:
                report = evaluate_all(self.model, self.corpora, self.plan.tasks, "val", self.vocab)
                log.info("step %d loss %.4f val %s", self.step, self.history[-1], report)
                if self.best is None or report["average"] > self.best[0]:
                    self.best = (report["average"], self.step, self.model.state())
                if callback is not None and callback(self, report):
                    break
        return self

    def restore_best(self):
        if self.best is not None:
            for k, arr in self.best[2].items():
                self.model.params[k].data = arr.copy()
        return self.model


# --------------------------------------------------------------------------
# few-shot transfer

def clone_model(model):
    out = HyperPELT(model.config, model.state())
    out.task_names = list(getattr(model, "task_names", []) or [])
    out.task_aliases = dict(getattr(model, "task_aliases", {}) or {})
    return out


def fewshot_init(model, new_task, source_task, random_seed=None):
    """Model with a slot for ``new_task`` whose embedding copies ``source_task``'s.

    With ``source_task=None`` the new slot is drawn from the embedding
    initialiser instead (seeded by ``random_seed``).  Passing the same name for
    both returns a copy with an alias.
    """
    names = list(getattr(model, "task_names", []) or [])
    if source_task is not None and source_task not in names:
        raise UnknownNameError(f"source task {source_task!r} not in checkpoint ({names})")
    if source_task is not None and new_task == source_task:
        out = clone_model(model)
        out.task_aliases[new_task] = names.index(source_task)
        return out
    cfg = model.config.replace(n_tasks=model.config.n_tasks + 1)
    state = model.state()
    slot = model.config.n_tasks
    if source_task is None:
        rng = np.random.default_rng([0 if random_seed is None else random_seed, 0xF5])
        from .hyperembed import EMBED_STD
        state[f"hyper.task_emb.{slot}"] = rng.normal(
            0.0, EMBED_STD, (cfg.prefix_len, cfg.d_task)).astype(np.float32)
    else:
        state[f"hyper.task_emb.{slot}"] = state[f"hyper.task_emb.{names.index(source_task)}"].copy()
    out = HyperPELT(cfg, state)
    out.task_names = names + [new_task]
    out.task_aliases = dict(getattr(model, "task_aliases", {}) or {})
    return out


def fewshot_tune(model, examples, task, mode="taskembed", steps=100, lr=1e-2,
                 batch_size=16, optimizer="adam", seed=0, val=None, vocab=None):
    """Fine-tune on a handful of examples.

    ``taskembed`` trains only the task's own embedding; ``full_pelt`` trains
    everything the hyperpelt mask allows.  With ``val`` examples the state with
    the best validation exact match is kept (early stopping).
    """
    vocab = vocab or desk_vocab()
    slot = model_task_index(model, task)
    if mode == "taskembed":
        mask = freeze_mask(model, "taskembed", target_task=slot)
    elif mode == "full_pelt":
        mask = freeze_mask(model, model.config.mode if model.config.mode != "taskembed" else "hyperpelt")
    else:
        raise UnknownNameError(f"unknown few-shot mode {mode!r}")
    opt = make_optimizer(optimizer, lr)
    rng = np.random.default_rng([seed, 0xF7])

    def val_acc():
        preds = predict(model, vocab, val, slot)
        return float(np.mean([p == e.target for p, e in zip(preds, val)]))

    best = (val_acc(), model.state()) if val else None
    for _ in range(steps):
        idx = rng.integers(0, len(examples), min(batch_size, len(examples)))
        training_step(model, make_batch(vocab, [examples[i] for i in idx], slot), mask, lr, opt)
        if val:
            acc = val_acc()
            if acc > best[0]:
                best = (acc, model.state())
    if best is not None:
        for k, arr in best[1].items():
            model.params[k].data = arr.copy()
    return model
