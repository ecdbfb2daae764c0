"""Two-phase optimization harness: multi-task pre-training, per-task few-shot
adaptation, greedy-decode evaluation, and the pairwise gradient-alignment
probe. Single-task batches, round-robin over tasks, early stopping on mean
validation perplexity with the best checkpoint restored.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError
from .model import ModularModel
from .routing import EVAL_MODE, TRAIN_MODE
from .backbone import PAD_ID
from .tasks import TaskSpec, TaskSet, batch_arrays
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 1000
    lr: float = 1e-2
    batch_size: int = 16
    eval_every: int = 50
    patience: int = 10            # evals without improvement before stopping
    adapt_steps: int = 100
    adapt_lr: float = 1e-2
    routing_lr: float = 0.0       # 0 = use lr for the routing logits too
    k_shots: int = 16
    val_fraction: float = 0.1
    align_every: int = 0          # 0 disables in-training alignment probes
    probe_batch: int = 32
    seed: int = 0


class Adam:
    """Adam with bias correction; moments exist only for the given params."""

    def __init__(self, params: list[Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump({"records": self.records, "evals": self.evals}, fh,
                      indent=1)

    def to_csv(self, path: str) -> None:
        rows = ([dict(kind="step", **r) for r in self.records]
                + [dict(kind="eval", **r) for r in self.evals])
        cols: list[str] = []
        for r in rows:
            for k in r:
                if k not in cols:
                    cols.append(k)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(rows)


@dataclass
class AlignmentReport:
    task_names: list[str]
    matrix: np.ndarray            # (T, T) cosine; nan where undefined
    mean_offdiag: float

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task"] + self.task_names)
            for name, row in zip(self.task_names, self.matrix):
                writer.writerow([name] + [f"{v:.10g}" for v in row])
            writer.writerow(["mean_offdiag", f"{self.mean_offdiag:.10g}"])


def _snapshot(model: ModularModel) -> dict:
    snap = {"inv": {sid: {n: t.data.copy() for n, t in names.items()}
                    for sid, names in model.inventory.stacks.items()}}
    if model.routing is not None:
        snap["logits"] = {g: t.data.copy()
                          for g, t in model.routing.logits.items()}
        snap["test_rows"] = {k: t.data.copy()
                             for k, t in model.routing.test_rows.items()}
    return snap


def _restore(model: ModularModel, snap: dict) -> None:
    for sid, names in snap["inv"].items():
        for n, data in names.items():
            model.inventory.stacks[sid][n].data = data.copy()
    if model.routing is not None and "logits" in snap:
        for g, data in snap["logits"].items():
            model.routing.logits[g].data = data.copy()
        for k, data in snap["test_rows"].items():
            model.routing.test_rows[k].data = data.copy()


def _mean_nll(model: ModularModel, task: str, examples,
              batch_size: int = 64) -> float:
    """Mean token NLL under deterministic routing (no Gumbel noise)."""
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            enc, dec, lab = batch_arrays(chunk)
            loss, _ = model.forward(enc, dec, lab, task, EVAL_MODE)
            n = int((lab != PAD_ID).sum())
            total += float(loss.data) * n
            count += n
    return total / count


def _validation_perplexity(model: ModularModel,
                           val_splits: dict[str, list]) -> float:
    nlls = [_mean_nll(model, task, exs) for task, exs in val_splits.items()
            if exs]
    return float(np.exp(np.mean(nlls)))


def _train_val_split(examples, fraction: float, rng: np.random.Generator):
    order = rng.permutation(len(examples))
    n_val = max(1, int(round(fraction * len(examples)))) \
        if len(examples) > 1 and fraction > 0 else 0
    val = [examples[i] for i in order[:n_val]]
    train = [examples[i] for i in order[n_val:]]
    return train, val


def _build_optimizers(model: ModularModel, params: list[Tensor],
                      config: TrainerConfig) -> list[Adam]:
    """One Adam for the skill inventory and, when routing_lr is set, a
    faster one for the routing logits."""
    if (config.routing_lr <= 0 or model.routing is None
            or model.routing.kind != "learned"):
        return [Adam(params, config.lr)]
    routed = {id(t) for t in model.routing.routing_tensors()}
    routing = [p for p in params if id(p) in routed]
    skills = [p for p in params if id(p) not in routed]
    opts = []
    if skills:
        opts.append(Adam(skills, config.lr))
    if routing:
        opts.append(Adam(routing, config.routing_lr))
    return opts


def pretrain(model: ModularModel, taskset: TaskSet,
             config: TrainerConfig) -> TrainLog:
    """Multi-task pre-training with round-robin single-task batches."""
    train_tasks = taskset.train_tasks
    if not train_tasks:
        raise ConfigurationError("pretraining needs at least one train task")
    rng = np.random.default_rng(config.seed)
    splits = {t.name: _train_val_split(t.examples, config.val_fraction, rng)
              for t in train_tasks}
    params = model.trainable("pretrain")
    opts = _build_optimizers(model, params, config)
    log = TrainLog()
    best = _snapshot(model)
    best_ppl = math.inf
    stale = 0
    has_val = any(v[1] for v in splits.values())
    model.phase = "pretrain"
    for step in range(config.steps):
        model.step = step
        task = train_tasks[step % len(train_tasks)].name
        pool = splits[task][0]
        idx = rng.integers(0, len(pool), size=min(config.batch_size,
                                                  len(pool)))
        enc, dec, lab = batch_arrays([pool[i] for i in idx])
        for opt in opts:
            opt.zero_grad()
        loss, _ = model.forward(enc, dec, lab, task, TRAIN_MODE, rng)
        if not np.isfinite(loss.data):
            _restore(model, best)
            raise TrainingError(f"loss diverged at step {step}")
        loss.backward()
        for opt in opts:
            opt.step()
        rec = {"step": step, "phase": "pretrain", "task": task,
               "loss": float(loss.data)}
        if config.align_every and step % config.align_every == 0:
            report = gradient_alignment(model, taskset, config.probe_batch,
                                        seed=config.seed)
            rec["alignment"] = report.mean_offdiag
        log.records.append(rec)
        if has_val and ((step + 1) % config.eval_every == 0
                        or step == config.steps - 1):
            ppl = _validation_perplexity(
                model, {k: v[1] for k, v in splits.items()})
            log.evals.append({"step": step, "phase": "pretrain",
                              "task": "__mean__", "split": "val",
                              "perplexity": ppl})
            if ppl < best_ppl:
                best_ppl = ppl
                best = _snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if has_val:
        _restore(model, best)
    return log


def adapt(model: ModularModel, task: TaskSpec, support,
          config: TrainerConfig) -> TrainLog:
    """Few-shot adaptation on one test task's support set.

    Must follow init_test_task. Uses an 80/20 support split for early
    stopping when there is room, otherwise the fixed step budget.
    """
    log = TrainLog()
    if not support:
        return log
    rng = np.random.default_rng(config.seed)
    n_val = len(support) // 5
    inner_train = support[n_val:]
    inner_val = support[:n_val]
    params = model.trainable("finetune", task=task.name)
    if not params:
        raise ConfigurationError(
            f"strategy {model.strategy.name} has nothing to fine-tune")
    opt = Adam(params, config.adapt_lr)
    best = _snapshot(model)
    best_ppl = math.inf
    stale = 0
    model.phase = "finetune"
    for step in range(config.adapt_steps):
        model.step = step
        opt.zero_grad()
        enc, dec, lab = batch_arrays(inner_train)
        loss, _ = model.forward(enc, dec, lab, task.name, TRAIN_MODE, rng)
        if not np.isfinite(loss.data):
            _restore(model, best)
            raise TrainingError(f"adaptation diverged at step {step}")
        loss.backward()
        opt.step()
        log.records.append({"step": step, "phase": "finetune",
                            "task": task.name, "loss": float(loss.data)})
        if inner_val and (step + 1) % max(1, config.eval_every // 10) == 0:
            ppl = float(np.exp(_mean_nll(model, task.name, inner_val)))
            log.evals.append({"step": step, "phase": "finetune",
                              "task": task.name, "split": "support-val",
                              "perplexity": ppl})
            if ppl < best_ppl - 1e-12:
                best_ppl = ppl
                best = _snapshot(model)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if inner_val:
        _restore(model, best)
    return log


def evaluate(model: ModularModel, task: str, query) -> dict:
    """Deterministic metrics over a query set.

    token_accuracy is teacher-forced next-token accuracy;
    sequence_exact_match uses greedy decoding; perplexity is
    exp(mean token NLL).
    """
    if not query:
        return {"token_accuracy": float("nan"),
                "sequence_exact_match": float("nan"),
                "perplexity": float("nan"), "num_examples": 0}
    correct, total = 0, 0
    exact = 0
    nll_total, nll_count = 0.0, 0
    max_tgt = max(len(t) for _, t in query) + 2
    with no_grad():
        for i in range(0, len(query), 64):
            chunk = query[i:i + 64]
            enc, dec, lab = batch_arrays(chunk)
            loss, logits = model.forward(enc, dec, lab, task, EVAL_MODE)
            mask = lab != PAD_ID
            pred = np.argmax(logits.data, axis=-1)
            correct += int((pred[mask] == lab[mask]).sum())
            total += int(mask.sum())
            nll_total += float(loss.data) * int(mask.sum())
            nll_count += int(mask.sum())
            decoded = model.decode(enc, task, max_tgt)
            for out, (_, tgt) in zip(decoded, chunk):
                exact += int(tuple(out) == tuple(tgt))
    return {"token_accuracy": correct / total,
            "sequence_exact_match": exact / len(query),
            "perplexity": float(np.exp(nll_total / nll_count)),
            "num_examples": len(query)}


def gradient_alignment(model: ModularModel, taskset: TaskSet,
                       probe_batch: int = 32, seed: int = 0) -> AlignmentReport:
    """Pairwise cosine similarity of per-task loss gradients over the
    trainable skill parameters, with deterministic (noise-free) routing."""
    train_tasks = taskset.train_tasks
    if len(train_tasks) < 2:
        raise ConfigurationError("alignment probe needs >= 2 train tasks")
    params = model.inventory.tensors()
    grads = []
    names = []
    for spec in train_tasks:
        # per-task rng keyed by a digest of the task's data, so the probe
        # is invariant to task iteration order and identical-data tasks
        # get identical probe batches
        digest = zlib.crc32(json.dumps(spec.examples).encode())
        rng = np.random.default_rng([seed, digest])
        idx = rng.integers(0, len(spec.examples),
                           size=min(probe_batch, len(spec.examples)))
        enc, dec, lab = batch_arrays([spec.examples[i] for i in idx])
        for p in params:
            p.grad = None
        loss, _ = model.forward(enc, dec, lab, spec.name, EVAL_MODE)
        loss.backward()
        flat = np.concatenate([
            (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
            for p in params])
        grads.append(flat)
        names.append(spec.name)
    T = len(grads)
    C = np.full((T, T), np.nan)
    norms = [np.linalg.norm(g) for g in grads]
    for i in range(T):
        for j in range(T):
            if norms[i] > 0 and norms[j] > 0:
                C[i, j] = float(grads[i] @ grads[j] / (norms[i] * norms[j]))
    off = [C[i, j] for i in range(T) for j in range(T)
           if i != j and np.isfinite(C[i, j])]
    mean_off = float(np.mean(off)) if off else float("nan")
    return AlignmentReport(names, C, mean_off)
