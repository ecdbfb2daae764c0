"""Task data: synthetic compositional generator with known skill allocation,
JSONL ingestion, whitespace tokenizer, and batching helpers.

Generator design: the symbol alphabet is split into one group per generator
skill; skill g is a non-identity permutation of its own group's symbols and
leaves everything else alone. A task applies the permutations of its active
skills token-wise, so targets are a pure function of (input, allocation,
seed) and the allocation is identifiable from behaviour.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .errors import ConfigurationError, DataError

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
TRAIN_SPLIT = "train-task"
TEST_SPLIT = "test-task"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise DataError("first four vocabulary entries must be reserved")

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks: list[str]) -> list[int]:
        idx = self.index
        return [idx.get(t, UNK_ID) for t in toks]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    def tokenize(self, text: str) -> list[int]:
        return self.encode(text.split())

    def detokenize(self, ids) -> str:
        return " ".join(self.decode(ids))

    def to_json(self) -> str:
        return json.dumps({t: i for i, t in enumerate(self.tokens)})

    @staticmethod
    def from_json(blob: str) -> "Vocabulary":
        mapping = json.loads(blob)
        toks = sorted(mapping, key=mapping.get)
        return Vocabulary(tuple(toks))


@dataclass
class TaskSpec:
    name: str
    split: str
    examples: list[tuple[tuple[int, ...], tuple[int, ...]]]
    truth_allocation: np.ndarray | None = None

    def __post_init__(self):
        if not self.examples:
            raise DataError(f"task {self.name!r} has no examples")
        if self.split not in (TRAIN_SPLIT, TEST_SPLIT):
            raise DataError(f"unknown split {self.split!r}")


@dataclass
class TaskSet:
    vocab: Vocabulary
    tasks: dict[str, TaskSpec] = field(default_factory=dict)

    @property
    def train_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks.values() if t.split == TRAIN_SPLIT]

    @property
    def test_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks.values() if t.split == TEST_SPLIT]

    def train_task_names(self) -> list[str]:
        return [t.name for t in self.train_tasks]


@dataclass(frozen=True)
class GeneratorConfig:
    num_generator_skills: int = 8
    num_train_tasks: int = 20
    num_test_tasks: int = 5
    skills_per_task: int = 3
    examples_per_task: int = 256
    seq_len: int = 8
    symbols_per_skill: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.skills_per_task <= self.num_generator_skills:
            raise ConfigurationError(
                f"skills_per_task {self.skills_per_task} outside "
                f"[1, {self.num_generator_skills}]")
        if self.symbols_per_skill < 2:
            raise ConfigurationError("need >= 2 symbols per skill for a "
                                     "non-identity permutation")


def _skill_permutations(config: GeneratorConfig,
                        rng: np.random.Generator) -> list[np.ndarray]:
    """One non-identity permutation over each skill's symbol-id block."""
    perms = []
    m = config.symbols_per_skill
    for g in range(config.num_generator_skills):
        base = len(RESERVED) + g * m
        ids = np.arange(base, base + m)
        perm = rng.permutation(ids)
        while np.array_equal(perm, ids):
            perm = rng.permutation(ids)
        perms.append(perm)
    return perms


def apply_skill(token_ids, skill: int, config: GeneratorConfig,
                perms: list[np.ndarray]) -> tuple[int, ...]:
    """Apply one generator skill's substitution to a token sequence."""
    m = config.symbols_per_skill
    base = len(RESERVED) + skill * m
    out = []
    for t in token_ids:
        if base <= t < base + m:
            out.append(int(perms[skill][t - base]))
        else:
            out.append(int(t))
    return tuple(out)


def generate_compositional_tasks(config: GeneratorConfig) -> TaskSet:
    """Deterministic TaskSet with known ground-truth skill allocations."""
    G, m = config.num_generator_skills, config.symbols_per_skill
    rng = np.random.default_rng(config.seed)
    symbols = [f"y{g}_{j}" for g in range(G) for j in range(m)]
    vocab = Vocabulary(RESERVED + tuple(symbols))
    perms = _skill_permutations(config, rng)
    sym_lo, sym_hi = len(RESERVED), len(RESERVED) + G * m

    def make_task(name: str, split: str) -> TaskSpec:
        active = np.sort(rng.choice(G, size=config.skills_per_task,
                                    replace=False))
        alloc = np.zeros(G)
        alloc[active] = 1.0
        examples = []
        for _ in range(config.examples_per_task):
            inp = tuple(int(x) for x in rng.integers(sym_lo, sym_hi,
                                                     size=config.seq_len))
            tgt = inp
            for g in active:
                tgt = apply_skill(tgt, int(g), config, perms)
            examples.append((inp, tgt))
        return TaskSpec(name, split, examples, truth_allocation=alloc)

    taskset = TaskSet(vocab)
    for i in range(config.num_train_tasks):
        taskset.tasks[f"train{i}"] = make_task(f"train{i}", TRAIN_SPLIT)
    for i in range(config.num_test_tasks):
        taskset.tasks[f"test{i}"] = make_task(f"test{i}", TEST_SPLIT)
    return taskset


def load_tasks(path: str) -> TaskSet:
    """Load a JSONL task file: one {task, split, input, target} per line.

    The vocabulary is built from the whitespace tokens of the whole corpus,
    sorted for determinism.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                task, split = row["task"], row["split"]
                inp, tgt = row["input"], row["target"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed line "
                                f"({exc})") from exc
            if split not in (TRAIN_SPLIT, TEST_SPLIT):
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            rows.append((task, split, inp, tgt))
    if not rows:
        raise DataError(f"{path}: no tasks")
    corpus_tokens = sorted({tok for _, _, inp, tgt in rows
                            for tok in inp.split() + tgt.split()})
    vocab = Vocabulary(RESERVED + tuple(corpus_tokens))
    taskset = TaskSet(vocab)
    for task, split, inp, tgt in rows:
        ex = (tuple(vocab.tokenize(inp)), tuple(vocab.tokenize(tgt)))
        if task in taskset.tasks:
            spec = taskset.tasks[task]
            if spec.split != split:
                raise DataError(f"task {task!r} appears in multiple splits")
            spec.examples.append(ex)
        else:
            taskset.tasks[task] = TaskSpec(task, split, [ex])
    return taskset


def export_tasks(taskset: TaskSet, path: str) -> None:
    with open(path, "w") as fh:
        for spec in taskset.tasks.values():
            for inp, tgt in spec.examples:
                fh.write(json.dumps({
                    "task": spec.name, "split": spec.split,
                    "input": taskset.vocab.detokenize(inp),
                    "target": taskset.vocab.detokenize(tgt)}) + "\n")


def few_shot_split(task: TaskSpec, k_shots: int, seed: int):
    """Deterministic (support, query) partition of a task's examples."""
    if k_shots >= len(task.examples):
        raise DataError(f"k_shots {k_shots} >= {len(task.examples)} examples")
    if k_shots < 0:
        raise DataError("k_shots must be nonnegative")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(task.examples))
    support = [task.examples[i] for i in order[:k_shots]]
    query = [task.examples[i] for i in order[k_shots:]]
    return support, query


def batch_arrays(examples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack examples into padded (enc_ids, dec_in, labels) arrays.

    dec_in is the bos-shifted target; labels append eos so the model learns
    to terminate. PAD_ID marks ignored positions in both.
    """
    if not examples:
        raise DataError("empty batch")
    n = max(len(inp) for inp, _ in examples)
    m = max(len(tgt) for _, tgt in examples) + 1
    B = len(examples)
    enc = np.full((B, n), PAD_ID, dtype=np.int64)
    dec_in = np.full((B, m), PAD_ID, dtype=np.int64)
    labels = np.full((B, m), PAD_ID, dtype=np.int64)
    for b, (inp, tgt) in enumerate(examples):
        enc[b, :len(inp)] = inp
        dec_in[b, 0] = BOS_ID
        dec_in[b, 1:len(tgt) + 1] = tgt
        labels[b, :len(tgt)] = tgt
        labels[b, len(tgt)] = EOS_ID
    return enc, dec_in, labels
