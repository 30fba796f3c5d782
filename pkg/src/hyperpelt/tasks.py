"""Task templates and synthetic desk-scale corpora.

Inputs start with a task prefix ending in a colon ("cola sentence:", "vqa
question:"); targets are verbalised labels or generated text.  The synthetic
suite has copy, reverse and marker-classification text tasks plus a visual
question task whose answers are encoded in synthetic image grids.
"""

import string
from dataclasses import dataclass, field

import numpy as np

from .backbone import EOS_ID, PAD_ID
from .errors import TemplateError, UnknownNameError
from .visual import VisualFeatures, synth_visual_features


@dataclass(frozen=True)
class TaskSpec:
    name: str
    template: str                 # e.g. "mrpc sentence1: {sentence1} sentence2: {sentence2}"
    verbalizer: dict = None       # label -> target text; None means the label is the text
    modality: str = "text"
    metric: str = "exact_match"

    def __post_init__(self):
        if not self.prefix or not self.prefix.endswith(":"):
            raise TemplateError(f"{self.name}: prefix {self.prefix!r} must be non-empty and end with ':'")
        if self.verbalizer is not None and len(set(self.verbalizer.values())) != len(self.verbalizer):
            raise TemplateError(f"{self.name}: verbalizer targets are not unique")

    @property
    def prefix(self):
        return self.template.split("{", 1)[0].strip()

    @property
    def slots(self):
        return [f for _, f, _, _ in string.Formatter().parse(self.template) if f]

    @property
    def labels(self):
        return list(self.verbalizer) if self.verbalizer else None


def format_example(spec, fields, label):
    """Render ``(input text, target text)`` for one example."""
    for slot in spec.slots:
        if slot not in fields:
            raise TemplateError(f"{spec.name}: missing slot {slot!r}")
        if not str(fields[slot]).strip():
            raise TemplateError(f"{spec.name}: empty slot {slot!r}")
    text = spec.template.format(**{k: str(v).strip() for k, v in fields.items()})
    if spec.verbalizer is None:
        target = str(label)
    else:
        try:
            target = spec.verbalizer[label]
        except KeyError:
            raise TemplateError(f"{spec.name}: label {label!r} has no verbalisation") from None
    return " ".join(text.split()), target


def task_of_input(text, specs):
    """Recover the task name from a formatted input via its unique prefix."""
    hits = [s.name for s in specs if text == s.prefix or text.startswith(s.prefix + " ")]
    if len(hits) != 1:
        raise UnknownNameError(f"no unique task prefix for {text!r}")
    return hits[0]


def _binary(a, b):
    return {a: a, b: b}


GLUE_FORMATS = {
    "cola": TaskSpec("cola", "cola sentence: {sentence}", _binary("acceptable", "unacceptable")),
    "sst2": TaskSpec("sst2", "sst2 sentence: {sentence}", _binary("positive", "negative")),
    "mrpc": TaskSpec("mrpc", "mrpc sentence1: {sentence1} sentence2: {sentence2}",
                     _binary("equivalent", "not_equivalent")),
    "qqp": TaskSpec("qqp", "qqp question1: {question1} question2: {question2}",
                    _binary("duplicate", "not_duplicate")),
    "stsb": TaskSpec("stsb", "stsb sentence1: {sentence1} sentence2: {sentence2}"),
    "mnli": TaskSpec("mnli", "mnli hypothesis: {hypothesis} premise: {premise}",
                     {k: k for k in ("entailment", "neutral", "contradiction")}),
    "qnli": TaskSpec("qnli", "qnli question: {question} sentence: {sentence}",
                     _binary("entailment", "not_entailment")),
    "rte": TaskSpec("rte", "rte sentence1: {sentence1} sentence2: {sentence2}",
                    _binary("entailment", "not_entailment")),
    "cb": TaskSpec("cb", "cb hypothesis: {hypothesis} premise: {premise}",
                   {k: k for k in ("entailment", "neutral", "contradiction")}),
    "trec": TaskSpec("trec", "trec question: {question}",
                     {k: k for k in ("DESC", "ENTY", "ABBR", "HUM", "NUM", "LOC")}),
    "boolq": TaskSpec("boolq", "boolq question: {question} context: {context}",
                      _binary("True", "False")),
    "imdb": TaskSpec("imdb", "imdb sentence: {sentence}", _binary("positive", "negative")),
    "paws": TaskSpec("paws", "paws sentence1: {sentence1} sentence2: {sentence2}",
                     _binary("equivalent", "not_equivalent")),
    "coco": TaskSpec("coco", "caption:", modality="vision_language"),
    "vqa": TaskSpec("vqa", "vqa question: {question}", modality="vision_language"),
    "gqa": TaskSpec("gqa", "gqa question: {question}", modality="vision_language"),
    "okvqa": TaskSpec("okvqa", "okvqa question: {question}", modality="vision_language"),
    "snli-ve": TaskSpec("snli-ve", "snli-ve premise: {premise}",
                        {k: k for k in ("entailment", "neutral", "contradiction")},
                        modality="vision_language"),
}


# --------------------------------------------------------------------------
# desk vocabulary

SYMBOLS = tuple("abcdefgh")
MARKERS = ("x", "y", "z")
SENTIMENTS = ("positive", "negative", "neutral")
COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle", "star")
QUESTIONS = ("color", "shape")

SYNTHETIC_TASKS = {
    "copy": TaskSpec("copy", "copy sentence: {sentence}"),
    "reverse": TaskSpec("reverse", "reverse sentence: {sentence}"),
    "classify": TaskSpec("classify", "classify sentence: {sentence}",
                         {m: s for m, s in zip(MARKERS, SENTIMENTS)}),
    "vqa": TaskSpec("vqa", "vqa question: {question}", modality="vision_language"),
    # held out for few-shot transfer
    "echo": TaskSpec("echo", "echo sentence: {sentence}"),
    "detect": TaskSpec("detect", "detect sentence: {sentence}",
                       {m: s for m, s in zip(MARKERS, SENTIMENTS)}),
}

TEXT_TASKS = ("copy", "reverse", "classify")


class Vocab:
    """Word-level vocabulary with reserved pad/eos/unk ids."""

    def __init__(self, words):
        self.itos = ["<pad>", "</s>", "<unk>"]
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        assert self.stoi["<pad>"] == PAD_ID and self.stoi["</s>"] == EOS_ID

    def __len__(self):
        return len(self.itos)

    def encode(self, text, eos=False):
        ids = [self.stoi.get(w, 2) for w in text.split()]
        return ids + [EOS_ID] if eos else ids

    def decode(self, ids):
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i != PAD_ID:
                words.append(self.itos[i] if i < len(self.itos) else "<unk>")
        return " ".join(words)


def desk_vocab():
    words = []
    for spec in list(SYNTHETIC_TASKS.values()):
        words += spec.prefix.split()
    words += list(SYMBOLS) + list(MARKERS) + list(SENTIMENTS)
    words += list(COLORS) + list(SHAPES) + list(QUESTIONS)
    return Vocab(words)


# --------------------------------------------------------------------------
# synthetic corpora

@dataclass
class Example:
    uid: int
    input: str
    target: str
    image: VisualFeatures = None


@dataclass
class SyntheticCorpus:
    task: str
    seed: int
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def spec(self):
        return SYNTHETIC_TASKS[self.task]

    def split(self, name):
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise UnknownNameError(f"unknown split {name!r}") from None


def _content(rng, length):
    return [SYMBOLS[i] for i in rng.integers(0, len(SYMBOLS), length)]


def _marker_sentence(rng, length):
    words = _content(rng, length - 1)
    marker = MARKERS[int(rng.integers(0, len(MARKERS)))]
    words.insert(int(rng.integers(0, length)), marker)
    return words, marker


def text_rule(task, words):
    """Rule oracle for the text tasks: the correct target for content ``words``."""
    if task in ("copy", "echo"):
        return " ".join(words)
    if task == "reverse":
        return " ".join(reversed(words))
    if task in ("classify", "detect"):
        hits = [w for w in words if w in MARKERS]
        return SYNTHETIC_TASKS[task].verbalizer[hits[0]]
    raise UnknownNameError(f"no rule for task {task!r}")


def _prototypes(seed, n_grid, d_visual):
    """Orthonormal grid patterns, one per colour and per shape (scaled to unit-variance entries)."""
    rng = np.random.default_rng([seed, 0xC01])
    k = len(COLORS) + len(SHAPES)
    q, _ = np.linalg.qr(rng.standard_normal((n_grid * d_visual, k)))
    protos = (q.T * np.sqrt(n_grid * d_visual)).reshape(k, n_grid, d_visual)
    return protos[:len(COLORS)], protos[len(COLORS):]


SCENE_NOISE = 0.3


def render_scene(image_id, color, shape, seed, n_grid=4, d_visual=16):
    """Grid features for an image of a coloured shape: noise plus two prototypes."""
    colors, shapes = _prototypes(seed, n_grid, d_visual)
    noise = synth_visual_features(image_id, seed, n_grid, d_visual).grid
    grid = SCENE_NOISE * noise + colors[color] + shapes[shape]
    return VisualFeatures(int(image_id), grid.astype(np.float32))


def read_scene(grid, seed):
    """Rule oracle for the visual task: nearest prototype per attribute."""
    n_grid, d_visual = grid.shape
    colors, shapes = _prototypes(seed, n_grid, d_visual)
    c = int(np.argmax([(grid * p).sum() for p in colors]))
    s = int(np.argmax([(grid * p).sum() for p in shapes]))
    return COLORS[c], SHAPES[s]


def vqa_rule(question, grid, seed):
    color, shape = read_scene(grid, seed)
    return color if question == "color" else shape


def _split(items, sizes):
    a, b, _ = sizes
    return items[:a], items[a:a + b], items[a + b:a + b + sizes[2]]


def make_corpus(task, seed, sizes=(2000, 200, 200), lengths=(3, 4), n_grid=4, d_visual=16):
    """Deterministic corpus with content-disjoint splits."""
    spec = SYNTHETIC_TASKS[task]
    rng = np.random.default_rng([seed, sum(map(ord, task))])
    total = sum(sizes)
    rows, seen = [], set()
    if spec.modality == "vision_language":
        for uid in range(total):
            color = int(rng.integers(len(COLORS)))
            shape = int(rng.integers(len(SHAPES)))
            question = QUESTIONS[int(rng.integers(len(QUESTIONS)))]
            image = render_scene(uid, color, shape, seed, n_grid, d_visual)
            text, target = format_example(spec, {"question": question}, vqa_rule(question, image.grid, seed))
            rows.append(Example(uid, text, target, image))
    else:
        attempts = 0
        while len(rows) < total:
            attempts += 1
            if attempts > 50 * total:
                raise RuntimeError(f"{task}: cannot draw {total} distinct examples")
            length = int(rng.integers(lengths[0], lengths[1] + 1))
            if task in ("classify", "detect"):
                words, _ = _marker_sentence(rng, length)
            else:
                words = _content(rng, length)
            key = tuple(words)
            if key in seen:
                continue
            seen.add(key)
            sentence = " ".join(words)
            if spec.verbalizer is None:
                text, target = format_example(spec, {"sentence": sentence}, text_rule(task, words))
            else:
                label = next(w for w in words if w in MARKERS)
                text, target = format_example(spec, {"sentence": sentence}, label)
            rows.append(Example(len(rows), text, target))
    train, val, test = _split(rows, sizes)
    return SyntheticCorpus(task, seed, train, val, test)


def make_synthetic_suite(seed, tasks=("copy", "reverse", "classify", "vqa"), **kw):
    return {t: make_corpus(t, seed, **kw) for t in tasks}


def oracle_predict(corpus, example):
    """Answer an example with the rule that generated the task."""
    spec = corpus.spec
    body = example.input[len(spec.prefix):].split()
    if spec.modality == "vision_language":
        return vqa_rule(body[0], example.image.grid, corpus.seed)
    return text_rule(corpus.task, body)


# --------------------------------------------------------------------------
# corpus files: one "input<TAB>target" line per example

def write_corpus_tsv(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            if "\t" in ex.input or "\t" in ex.target or "\n" in ex.input + ex.target:
                raise TemplateError(f"example {ex.uid}: tab or newline in text")
            fh.write(f"{ex.input}\t{ex.target}\n")


def read_corpus_tsv(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TemplateError(f"{path}:{i + 1}: expected input<TAB>target")
            out.append(Example(i, parts[0], parts[1]))
    return out


def encode_examples(vocab, examples):
    """Pad to rectangular id arrays: inputs (B, M), targets with EOS (B, T)."""
    ins = [vocab.encode(e.input) for e in examples]
    outs = [vocab.encode(e.target, eos=True) for e in examples]
    m = max(len(x) for x in ins)
    t = max(len(y) for y in outs)
    inputs = np.full((len(examples), m), PAD_ID, dtype=np.int64)
    targets = np.full((len(examples), t), PAD_ID, dtype=np.int64)
    for r, (x, y) in enumerate(zip(ins, outs)):
        inputs[r, :len(x)] = x
        targets[r, :len(y)] = y
    return inputs, targets
