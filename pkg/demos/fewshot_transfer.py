"""Adapt a trained model to a held-out task by tuning one task embedding.

Run demos/multitask_training.py first; it writes multitask.ckpt.  The new
task (detect) starts either from the classify embedding or from a random
draw, and only its prefix_len x d_task embedding is trained on 16 examples.
"""

import sys

import numpy as np

from hyperpelt.checkpoint import load_checkpoint
from hyperpelt.tasks import make_corpus
from hyperpelt.trainer import evaluate, fewshot_init, fewshot_tune


def main(path="multitask.ckpt", seeds=5):
    base = load_checkpoint(path).model()
    corpus = make_corpus("detect", 0, sizes=(200, 50, 200))
    for source in ("classify", None):
        accs = []
        for seed in range(int(seeds)):
            rng = np.random.default_rng([seed, 16])
            shots = [corpus.train[i] for i in rng.choice(len(corpus.train), 16, replace=False)]
            model = fewshot_init(base, "detect", source, random_seed=seed)
            fewshot_tune(model, shots, "detect", steps=100, seed=seed)
            accs.append(evaluate(model, {"detect": corpus}, "detect", "test")["accuracy"])
        print(f"init from {source or 'random z':9s} accuracies {np.round(accs, 3).tolist()} "
              f"median {np.median(accs):.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
