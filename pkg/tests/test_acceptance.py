"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS`` or ``FAIL`` line (also repeated in the
pytest terminal summary) and then asserts, so a failure stays visible.
Run ``python3 tests/test_acceptance.py`` for the verdict lines alone.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import VERDICTS
from hyperpelt import budget
from hyperpelt.checkpoint import from_trainer, load_checkpoint, resume_trainer, save_checkpoint
from hyperpelt.config import C1, ModelConfig, load_config
from hyperpelt.model import HyperPELT, freeze_mask
from hyperpelt.tasks import make_corpus, make_synthetic_suite
from hyperpelt.trainer import (TrainPlan, Trainer, evaluate, evaluate_all, fewshot_init,
                               fewshot_tune, task_probabilities)
from hyperpelt.verify import (MODES, check_prefix_equivalence, freeze_run, model_grad_check,
                              sampler_frequencies)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TEXT_TASKS = ["copy", "reverse", "classify"]


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_prefix_equivalence():
    t0 = time.perf_counter()
    res = check_prefix_equivalence(n_instances=500, tol=1e-5)
    seconds = time.perf_counter() - t0
    verdict(1, res.passed and seconds < 10,
            f"prefix equivalence, {res.detail}, {seconds:.2f}s (limit 10s)")


# ---------------------------------------------------------------- 2

def test_criterion_2_gradient_fidelity():
    t0 = time.perf_counter()
    reports = {m: model_grad_check(C1.replace(mode=m), eps=1e-3, tol=1e-3)
               for m in ("hyperpelt", "vl_hyperpelt")}
    seconds = time.perf_counter() - t0
    ok = all(r.passed for r in reports.values()) and seconds < 120
    detail = "; ".join(f"{m}: {r.summary()}" for m, r in reports.items())
    verdict(2, ok, f"gradient check, {detail}, {seconds:.1f}s (limit 120s)")


# ---------------------------------------------------------------- 3

def test_criterion_3_freeze_invariant():
    problems = []
    for mode in MODES:
        model, mask, initial = freeze_run(C1, mode, steps=500)
        moved = {k for k, t in model.params.items() if t.data.tobytes() != initial[k].tobytes()}
        trainable = {k for k, v in mask.items() if v}
        expected = {k for k, v in freeze_mask(model, mode, 0 if mode == "taskembed" else None).items() if v}
        if moved - trainable:
            problems.append(f"{mode}: frozen moved {sorted(moved - trainable)[:2]}")
        if moved != trainable or trainable != expected:
            problems.append(f"{mode}: trained set differs from mask")
    verdict(3, not problems, "freeze invariant after 500 steps in "
            + ", ".join(MODES) + (f"; {problems}" if problems else ""))


# ---------------------------------------------------------------- 4

def _random_config(rng):
    heads = int(rng.integers(1, 4))
    width = heads * int(rng.integers(1, 7))
    return ModelConfig(
        n_layers=int(rng.integers(1, 4)), n_heads=heads, d_model=width,
        d_ff=int(rng.integers(1, 13)), vocab_size=int(rng.integers(3, 30)),
        prefix_len=int(rng.integers(1, 6)), d_task=int(rng.integers(1, 7)),
        d_hyper_mid=int(rng.integers(1, 7)), d_hyper=int(rng.integers(1, 7)),
        d_adapter=int(rng.integers(1, width + 1)), d_visual=int(rng.integers(1, 7)),
        n_tasks=int(rng.integers(1, 5)), rel_buckets=int(rng.integers(2, 7)),
        seed=int(rng.integers(0, 1000)))


def test_criterion_4_parameter_accounting():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for i in range(50):
        cfg = _random_config(rng)
        mode = ("full", "hyperprefix", "hyperpelt", "taskembed", "vl_hyperpelt")[i % 5]
        model = HyperPELT(cfg.replace(mode="hyperpelt" if mode == "taskembed" else mode))
        live = budget.introspect_count(model, freeze_mask(model, mode))[0]
        mismatches += budget.corrected_count(mode, cfg) != live
    large = load_config(CONFIGS / "t5_base.cfg")[0]
    ordered, fractions = budget.per_task_ordering(large)
    prompt = budget.closed_form_count("prompt", large).formula
    ok = mismatches == 0 and ordered and prompt == 37_632
    shown = ", ".join(f"{m} {100 * f:.4f}%" for m, f in fractions.items())
    verdict(4, ok, f"(a) {50 - mismatches}/50 random configs exact; "
            f"(b) ordering {'holds' if ordered else 'fails'}: {shown}; (c) prompt row {prompt}")


# ---------------------------------------------------------------- 5

def _train_until(config, opts, tasks, max_steps=5000, target=0.95):
    suite = make_synthetic_suite(0, tasks=tasks)
    plan = TrainPlan(tasks, [len(suite[t].train) for t in tasks], temperature=opts["temperature"],
                     steps=max_steps, batch_size=opts["batch_size"],
                     learning_rate=opts["learning_rate"], eval_every=opts["eval_every"],
                     optimizer=opts["optimizer"], mode=config.mode, seed=config.seed)
    model = HyperPELT(config.replace(n_tasks=len(tasks)))
    t0 = time.perf_counter()
    trainer = Trainer(model, plan, suite)
    # stop once every validation score clears the bar with a small margin
    trainer.run(callback=lambda tr, rep: min(rep[t] for t in tasks) >= target + 0.02)
    test = evaluate_all(model, suite, tasks, "test")
    return trainer, test, time.perf_counter() - t0


@pytest.fixture(scope="module")
def text_run():
    config, opts = load_config(CONFIGS / "c1_scaled.cfg")
    return _train_until(config, opts, TEXT_TASKS)


def test_criterion_5_multitask_learning(text_run):
    config, opts = load_config(CONFIGS / "c1_scaled.cfg")
    trainer, test, seconds = text_run
    vl_trainer, vl_test, vl_seconds = _train_until(config.replace(mode="vl_hyperpelt"), opts, ["vqa"])
    ok = (all(test[t] >= 0.95 for t in TEXT_TASKS) and vl_test["vqa"] >= 0.95
          and trainer.step <= 5000 and vl_trainer.step <= 5000
          and seconds < 300 and vl_seconds < 300)
    scores = ", ".join(f"{t} {test[t]:.3f}" for t in TEXT_TASKS)
    verdict(5, ok, f"hyperpelt test accuracy {scores} after {trainer.step} steps ({seconds:.0f}s); "
            f"vl_hyperpelt vqa {vl_test['vqa']:.3f} after {vl_trainer.step} steps ({vl_seconds:.0f}s)")


# ---------------------------------------------------------------- 6

def test_criterion_6_sampler_statistics():
    draws = 100_000
    q = task_probabilities([100, 300], 2.0)
    freq = sampler_frequencies((100, 300), 2.0, draws, seed=0)
    sigma = np.sqrt(q * (1 - q) / draws)
    ok = bool((np.abs(freq - q) <= 3 * sigma).all()) and np.allclose(q, [0.3660, 0.6340], atol=5e-5)
    verdict(6, ok, f"sampler q={np.round(q, 4).tolist()} freq={np.round(freq, 4).tolist()} "
            f"|z|max={np.max(np.abs(freq - q) / sigma):.2f}")


# ---------------------------------------------------------------- 7

def test_criterion_7_fewshot_protocol(text_run):
    base = text_run[0].model
    corpus = make_corpus("detect", 0, sizes=(200, 50, 200))
    elements = []
    accs = {"classify": [], "random": []}
    for seed in range(5):
        rng = np.random.default_rng([seed, 16])
        shots = [corpus.train[i] for i in rng.choice(len(corpus.train), 16, replace=False)]
        for source in accs:
            model = fewshot_init(base, "detect", None if source == "random" else source,
                                 random_seed=seed)
            mask = freeze_mask(model, "taskembed", target_task=model.config.n_tasks - 1)
            elements.append(sum(model.params[k].data.size for k, v in mask.items() if v))
            fewshot_tune(model, shots, "detect", steps=100, seed=seed)
            accs[source].append(evaluate(model, {"detect": corpus}, "detect", "test")["accuracy"])
    n_dt = base.config.prefix_len * base.config.d_task
    med = {k: float(np.median(v)) for k, v in accs.items()}
    ok = set(elements) == {n_dt} and med["classify"] >= med["random"]
    verdict(7, ok, f"taskembed trains {sorted(set(elements))} elements (N*d_t={n_dt}); "
            f"16-shot detect median accuracy from classify {med['classify']:.3f} "
            f"vs random z {med['random']:.3f}")


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism_and_persistence(tmp_path):
    suite = make_synthetic_suite(0, tasks=TEXT_TASKS, sizes=(300, 20, 20))

    def plan():
        return TrainPlan(TEXT_TASKS, [300] * 3, steps=30, batch_size=8, learning_rate=3e-3,
                         optimizer="adam", seed=11)

    def same(a, b):
        return all(a.params[k].data.tobytes() == t.data.tobytes() for k, t in b.params.items())

    a = Trainer(HyperPELT(C1), plan(), suite).run()
    b = Trainer(HyperPELT(C1), plan(), suite).run()
    reproducible = a.history == b.history and same(a.model, b.model)

    path = tmp_path / "a.ckpt"
    save_checkpoint(path, from_trainer(a))
    ckpt = load_checkpoint(path)
    save_checkpoint(tmp_path / "b.ckpt", ckpt)
    round_trip = same(ckpt.model(), a.model) and path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    first = Trainer(HyperPELT(C1), plan(), suite).run(12)
    save_checkpoint(tmp_path / "k.ckpt", from_trainer(first))
    resumed = resume_trainer(load_checkpoint(tmp_path / "k.ckpt"), plan(), suite).run(18)
    resume_ok = resumed.history == a.history[12:] and same(resumed.model, a.model)

    verdict(8, reproducible and round_trip and resume_ok,
            f"bit-reproducible runs {reproducible}, checkpoint round trip {round_trip}, "
            f"resume at step 12 equals continuous run {resume_ok}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
