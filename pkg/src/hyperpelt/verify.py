"""The property suite behind ``hyperpelt verify``.

Each check returns a :class:`CheckResult`; :func:`run_suite` runs them all.
"""

import time
from dataclasses import dataclass

import numpy as np

from .config import C1
from .gradcheck import grad_check
from .hypernets import random_prefix_instance, verify_prefix_equivalence
from .model import Batch, HyperPELT, freeze_mask
from .tasks import make_synthetic_suite
from .trainer import TrainPlan, Trainer, sample_task, task_probabilities

MODES = ("full", "hyperprefix", "hyperpelt", "taskembed", "vl_hyperpelt")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_prefix_equivalence(n_instances=500, tol=1e-5, seed=0):
    """Concatenated-prefix attention equals the gated interpolation form."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        worst = max(worst, verify_prefix_equivalence(random_prefix_instance(rng), tol).max_deviation)
    return CheckResult("prefix-equivalence", worst < tol,
                       f"{n_instances} instances, max abs deviation {worst:.2e} (tol {tol:g})")


def gradcheck_batch(config, seed=0):
    """Tiny fixed batch for finite-difference checks."""
    rng = np.random.default_rng([seed, 7])
    inputs = np.array([[5, 6, 7, 1], [8, 9, 1, 0]])
    targets = np.array([[10, 11, 1], [12, 1, 0]])
    visual = rng.standard_normal((2, config.prefix_len, config.d_visual)) if config.visual else None
    return Batch(0, inputs, targets, visual)


def model_grad_check(config, eps=1e-3, tol=1e-3, max_elements=8, directions=3, seed=0):
    """Finite-difference check of every trainable tensor of a ``config`` model."""
    model = HyperPELT(config)
    mask = freeze_mask(model)
    batch = gradcheck_batch(config, seed)
    trainable = {k: t for k, t in model.params.items() if mask[k]}
    frozen = [t for k, t in model.params.items() if not mask[k]]
    return grad_check(lambda: model.loss(batch), trainable, eps=eps, tol=tol, shadow=frozen,
                      max_elements=max_elements, seed=seed, directions=directions)


@_timed
def check_gradients(config=C1, mode="hyperpelt", tol=1e-3):
    report = model_grad_check(config.replace(mode=mode), tol=tol)
    return CheckResult(f"gradcheck[{mode}]", report.passed, report.summary())


def _suite_for(mode, seed=0, sizes=(200, 20, 20)):
    tasks = ("copy", "reverse", "classify") + (("vqa",) if mode == "vl_hyperpelt" else ())
    return list(tasks), make_synthetic_suite(seed, tasks=tasks, sizes=sizes)


def freeze_run(config, mode, steps, seed=0, learning_rate=1e-3, optimizer="sgd"):
    """Train ``steps`` steps in ``mode``; return (model, mask, initial state)."""
    tasks, suite = _suite_for(mode, seed)
    cfg = config.replace(mode=mode if mode != "taskembed" else "hyperpelt", n_tasks=len(tasks))
    model = HyperPELT(cfg)
    plan = TrainPlan(tasks, [len(suite[t].train) for t in tasks], steps=max(steps, 1),
                     learning_rate=learning_rate, seed=seed, mode=mode, optimizer=optimizer,
                     batch_size=8, target_task=0 if mode == "taskembed" else None)
    trainer = Trainer(model, plan, suite)
    if mode == "taskembed":
        trainer.plan.tasks, trainer.plan.sizes = tasks[:1], [len(suite[tasks[0]].train)]
    initial = model.state()
    trainer.run(steps)
    return model, trainer.mask, initial


@_timed
def check_freeze(config=C1, mode="hyperpelt", steps=20):
    model, mask, initial = freeze_run(config, mode, steps)
    moved = {k for k, t in model.params.items() if not np.array_equal(t.data, initial[k])}
    frozen_moved = sorted(k for k in moved if not mask[k])
    trainable = {k for k, v in mask.items() if v}
    flags_ok = all(t.requires_grad == mask[k] for k, t in model.params.items())
    # embeddings of tasks the sampler never drew stay put, so only require some movement
    ok = not frozen_moved and bool(moved) and flags_ok
    detail = (f"{steps} steps, {len(trainable)} trainable tensors, {len(moved)} moved, "
              f"frozen moved: {frozen_moved[:3] or 'none'}")
    return CheckResult(f"freeze[{mode}]", ok, detail)


def sampler_frequencies(sizes=(100, 300), temperature=2.0, draws=100_000, seed=0):
    """Empirical task frequencies from ``draws`` sampler calls."""
    rng = np.random.default_rng(seed)
    plan = TrainPlan([f"t{i}" for i in range(len(sizes))], list(sizes), temperature=temperature)
    counts = np.bincount([sample_task(plan, rng) for _ in range(draws)], minlength=len(sizes))
    return counts / draws


@_timed
def check_sampler(sizes=(100, 300), temperature=2.0, draws=100_000, seed=0):
    q = task_probabilities(sizes, temperature)
    freq = sampler_frequencies(sizes, temperature, draws, seed)
    sigma = np.sqrt(q * (1 - q) / draws)
    z = np.abs(freq - q) / sigma
    return CheckResult("sampler", bool((z <= 3).all()),
                       f"q={np.round(q, 4).tolist()} freq={np.round(freq, 4).tolist()} "
                       f"max |z|={z.max():.2f}")


def run_suite(config=C1, freeze_steps=20, log=print):
    """Run every check; ``log`` receives one line per check."""
    checks = [lambda: check_prefix_equivalence()]
    checks += [lambda m=m: check_gradients(config, m) for m in ("hyperpelt", "vl_hyperpelt")]
    checks += [lambda m=m: check_freeze(config, m, freeze_steps) for m in MODES]
    checks += [lambda: check_sampler()]
    results = []
    for check in checks:
        res = check()
        results.append(res)
        if log:
            log(res.line())
    return results
