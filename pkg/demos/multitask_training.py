"""Train generated prefixes and adapters on three text tasks over a frozen random backbone.

Uses configs/c1_scaled.cfg (width 64, absolute positions, Adam).  Takes one
to two minutes on a single core; validation accuracy is printed every 250 steps.
"""

import sys
import time
from pathlib import Path

from hyperpelt.checkpoint import from_trainer, save_checkpoint
from hyperpelt.config import load_config
from hyperpelt.model import HyperPELT
from hyperpelt.tasks import make_synthetic_suite
from hyperpelt.trainer import TrainPlan, Trainer, evaluate_all

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TASKS = ["copy", "reverse", "classify"]


def main(out="multitask.ckpt"):
    config, opts = load_config(CONFIGS / "c1_scaled.cfg")
    suite = make_synthetic_suite(0, tasks=TASKS)
    plan = TrainPlan(TASKS, [len(suite[t].train) for t in TASKS], steps=opts["steps"],
                     batch_size=opts["batch_size"], learning_rate=opts["learning_rate"],
                     optimizer=opts["optimizer"], eval_every=opts["eval_every"])
    trainer = Trainer(HyperPELT(config.replace(n_tasks=len(TASKS))), plan, suite)
    start = time.perf_counter()

    def report(tr, rep):
        scores = " ".join(f"{t}={rep[t]:.3f}" for t in TASKS)
        print(f"step {tr.step:5d}  loss {tr.history[-1]:.3f}  val {scores}  "
              f"({time.perf_counter() - start:.0f}s)")
        return min(rep[t] for t in TASKS) >= 0.97

    trainer.run(callback=report)
    test = evaluate_all(trainer.model, suite, TASKS, "test")
    print("test:", {t: round(test[t], 3) for t in TASKS})
    save_checkpoint(out, from_trainer(trainer))
    print("saved", out)


if __name__ == "__main__":
    main(*sys.argv[1:])
