"""Command-line entry point: ``hyperpelt <subcommand> [flags]``."""

import argparse
import logging
import os
import sys

import numpy as np

from . import budget
from .checkpoint import from_model, from_trainer, load_checkpoint, resume_trainer, save_checkpoint
from .config import C1, MODES, load_config
from .errors import ContractError, FormatError, TemplateError, UnknownNameError
from .model import HyperPELT
from .tasks import SYNTHETIC_TASKS, TEXT_TASKS, make_corpus, make_synthetic_suite, write_corpus_tsv
from .trainer import TrainPlan, Trainer, evaluate, evaluate_all, fewshot_init, fewshot_tune
from .visual import write_visual_features


def _task_list(text):
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    unknown = [t for t in tasks if t not in SYNTHETIC_TASKS]
    if not tasks or unknown:
        raise argparse.ArgumentTypeError(
            f"unknown task(s) {unknown or text!r}; choose from {sorted(SYNTHETIC_TASKS)}")
    return tasks


def _load(args):
    """(ModelConfig, train options) from --config, then command-line overrides."""
    if args.config:
        config, train = load_config(args.config)
    else:
        config, train = C1, {}
    if getattr(args, "mode", None):
        config = config.replace(mode=args.mode)
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config, train


def _default_tasks(mode):
    return list(TEXT_TASKS) + (["vqa"] if mode == "vl_hyperpelt" else [])


def _report(trainer, report):
    print(f"step={trainer.step} loss={trainer.history[-1]:.4f} val_average={report['average']:.4f}")
    return False


def cmd_train(args):
    config, opts = _load(args)
    tasks = args.tasks or (_task_list(opts["tasks"]) if "tasks" in opts else _default_tasks(config.mode))
    config = config.replace(n_tasks=len(tasks))
    steps = args.steps if args.steps is not None else opts.get("steps", 1000)
    suite = make_synthetic_suite(args.data_seed, tasks=tasks)
    plan = TrainPlan(
        tasks, [len(suite[t].train) for t in tasks],
        temperature=args.temperature if args.temperature is not None else opts.get("temperature", 2.0),
        steps=max(steps, 1), batch_size=opts.get("batch_size", 32),
        learning_rate=args.lr if args.lr is not None else opts.get("learning_rate", 1e-3),
        eval_every=args.eval_every if args.eval_every is not None else opts.get("eval_every", 0),
        seed=opts.get("train_seed", config.seed), mode=config.mode,
        optimizer=args.optimizer or opts.get("optimizer", "sgd"))
    if args.resume:
        trainer = resume_trainer(load_checkpoint(args.resume), plan, suite)
    else:
        trainer = Trainer(HyperPELT(config), plan, suite)
    remaining = max(steps - trainer.step, 0)
    if remaining:
        trainer.run(remaining, callback=_report)
        if args.keep_best:
            trainer.restore_best()
    if trainer.history:
        print(f"step={trainer.step} loss={trainer.history[-1]:.4f}")
    save_checkpoint(args.checkpoint, from_trainer(trainer))
    print(f"checkpoint={args.checkpoint} step={trainer.step}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    tasks = args.tasks or ckpt.tasks
    suite = make_synthetic_suite(args.data_seed, tasks=tasks)
    for t in tasks:
        rep = evaluate(model, suite, t, args.split)
        print(f"task={t} split={args.split} accuracy={rep['accuracy']:.4f} n={rep['n']}")
    print(f"average={evaluate_all(model, suite, tasks, args.split)['average']:.4f}")
    return 0


def cmd_fewshot(args):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model()
    seed = args.seed or 0
    source = None if args.source_task == "random" else args.source_task
    model = fewshot_init(model, args.task, source, random_seed=seed)
    corpus = make_corpus(args.task, args.data_seed)
    rng = np.random.default_rng([seed, 16])
    shots = [corpus.train[i] for i in rng.choice(len(corpus.train), args.shots, replace=False)]
    val = corpus.val[:args.shots]
    fewshot_tune(model, shots, args.task, mode=args.tune, steps=args.steps, lr=args.lr or 1e-2,
                 seed=seed, val=val)
    rep = evaluate(model, {args.task: corpus}, args.task, "test")
    print(f"task={args.task} source={args.source_task} shots={args.shots} "
          f"test_accuracy={rep['accuracy']:.4f}")
    if args.out:
        save_checkpoint(args.out, from_model(model))
        print(f"checkpoint={args.out}")
    return 0


def cmd_count_params(args):
    config, _ = _load(args)
    methods = [args.method] if args.method else list(budget.METHODS)
    for m in methods:
        if m not in budget.METHODS:
            raise UnknownNameError(f"unknown method {m!r}; choose from {budget.METHODS}")
    introspect = {}
    if budget.backbone_count(config) <= 5_000_000:
        introspect = budget.introspect_small(config)
    rows = budget.compare_methods(config, methods, introspect)
    print(budget.format_table(rows))
    for line in budget.machine_lines(rows):
        print(line)
    return 0


def cmd_verify(args):
    from .verify import run_suite
    config, _ = _load(args)
    results = run_suite(config, freeze_steps=args.freeze_steps)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_gen_data(args):
    tasks = args.tasks or list(SYNTHETIC_TASKS)
    os.makedirs(args.out, exist_ok=True)
    for t in tasks:
        corpus = make_corpus(t, args.data_seed)
        for split in ("train", "val", "test"):
            examples = corpus.split(split)
            path = os.path.join(args.out, f"{t}.{split}.tsv")
            write_corpus_tsv(path, examples)
            if examples and examples[0].image is not None:
                write_visual_features(os.path.join(args.out, f"{t}.{split}.hpvf"),
                                      [e.image for e in examples])
        print(f"task={t} train={len(corpus.train)} val={len(corpus.val)} test={len(corpus.test)}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hyperpelt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="model / run seed")
        p.add_argument("--data-seed", type=int, default=0, help="synthetic corpus seed")
        if mode:
            p.add_argument("--mode", choices=MODES)

    p = sub.add_parser("train", help="multi-task training")
    common(p)
    p.add_argument("--tasks", type=_task_list)
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", default="hyperpelt.ckpt", help="output checkpoint path")
    p.add_argument("--temperature", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--eval-every", type=int)
    p.add_argument("--keep-best", action="store_true",
                   help="finish with the parameters of the best validation average")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", type=_task_list)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--data-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="few-shot transfer to a held-out task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=sorted(SYNTHETIC_TASKS))
    p.add_argument("--source-task", required=True, help="trained task to copy, or 'random'")
    p.add_argument("--tune", choices=("taskembed", "full_pelt"), default="taskembed")
    p.add_argument("--shots", type=int, default=16)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out", help="write the tuned model here")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("count-params", help="trainable-parameter budget table")
    common(p)
    p.add_argument("--method", help=f"one of {', '.join(budget.METHODS)} (default: all)")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("verify", help="run the property suite")
    common(p, mode=False)
    p.add_argument("--freeze-steps", type=int, default=20)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-data", help="write synthetic corpora and visual feature files")
    p.add_argument("--tasks", type=_task_list)
    p.add_argument("--data-seed", "--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, FormatError, TemplateError, UnknownNameError, OSError) as exc:
        print(f"hyperpelt {args.command}: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (UnknownNameError, FormatError)) else 1


if __name__ == "__main__":
    sys.exit(main())
