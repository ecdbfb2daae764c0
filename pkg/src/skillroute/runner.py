"""Experiment orchestration shared by the CLI and the scripts: build task
sets and models from a config, run the two phases, and emit result tables.
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .backbone import BackboneConfig, build_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, save_config
from .model import ModularModel
from .routing import TemperatureSchedule
from .strategies import build_strategy, init_test_task
from .tasks import GeneratorConfig, TaskSet, few_shot_split, \
    generate_compositional_tasks, load_tasks
from .trainer import TrainerConfig, adapt, evaluate, gradient_alignment, \
    pretrain

METRICS = ("token_accuracy", "sequence_exact_match", "perplexity")


def build_taskset(cfg: ExperimentConfig) -> TaskSet:
    t = cfg.tasks
    if t.source == "jsonl":
        return load_tasks(t.path)
    return generate_compositional_tasks(GeneratorConfig(
        num_generator_skills=t.num_generator_skills,
        num_train_tasks=t.num_train_tasks,
        num_test_tasks=t.num_test_tasks,
        skills_per_task=t.skills_per_task,
        examples_per_task=t.examples_per_task,
        seq_len=t.seq_len,
        symbols_per_skill=t.symbols_per_skill,
        seed=t.seed))


def trainer_config(cfg: ExperimentConfig, seed: int) -> TrainerConfig:
    t = cfg.trainer
    return TrainerConfig(steps=t.steps, lr=t.lr, batch_size=t.batch_size,
                         eval_every=t.eval_every, patience=t.patience,
                         adapt_steps=t.adapt_steps, adapt_lr=t.adapt_lr,
                         routing_lr=t.routing_lr,
                         k_shots=t.k_shots, val_fraction=t.val_fraction,
                         align_every=t.align_every,
                         probe_batch=t.probe_batch, seed=seed)


def build_model(cfg: ExperimentConfig, taskset: TaskSet, seed: int,
                strategy_name: str | None = None) -> ModularModel:
    b = cfg.backbone
    vocab = b.vocab_size or len(taskset.vocab)
    backbone = build_backbone(BackboneConfig(
        vocab_size=vocab, model_dim=b.model_dim, num_layers=b.num_layers,
        ff_dim=b.ff_dim or None, max_seq_len=b.max_seq_len, seed=b.seed))
    s = cfg.strategy
    name = (strategy_name or s.name).lower()
    train_names = taskset.train_task_names()
    num_skills = s.num_skills
    if name in ("private-mu", "adapter-soup"):
        num_skills = len(train_names)
    strategy = build_strategy(name, num_tasks=len(train_names),
                              num_skills=num_skills, num_heads=s.num_heads,
                              soup_k=s.soup_k)
    schedule = TemperatureSchedule(s.tau_init, s.tau_final,
                                   anneal_steps=max(cfg.trainer.steps, 1))
    return ModularModel.build(backbone, strategy, train_names, seed,
                              parametrization=s.parametrization, rank=s.rank,
                              granularity=s.granularity, schedule=schedule)


def run_pretrain(cfg: ExperimentConfig, out_dir: str | None = None,
                 seed: int | None = None,
                 strategy_name: str | None = None):
    """Pre-train one model and persist checkpoint + logs; returns
    (checkpoint dir, model, taskset, log)."""
    out_dir = out_dir or cfg.resolved_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    seed = cfg.trainer.seeds[0] if seed is None else seed
    taskset = build_taskset(cfg)
    model = build_model(cfg, taskset, seed, strategy_name)
    log = pretrain(model, taskset, trainer_config(cfg, seed))
    ckpt = os.path.join(out_dir, "checkpoint")
    save_checkpoint(ckpt, model)
    with open(os.path.join(ckpt, "vocab.json"), "w") as fh:
        fh.write(taskset.vocab.to_json())
    log.to_csv(os.path.join(out_dir, "trainlog.csv"))
    log.to_json(os.path.join(out_dir, "trainlog.json"))
    save_config(cfg, os.path.join(out_dir, "config.toml"))
    return ckpt, model, taskset, log


def adapt_eval_rows(cfg: ExperimentConfig, pretrained: ModularModel,
                    taskset: TaskSet, strategy_name: str,
                    seeds: list[int]) -> list[dict]:
    """Per (test task x seed): init -> adapt -> evaluate, from a shared
    pre-trained model that is never mutated."""
    rows = []
    train_inputs = {t.name: [np.array(inp) for inp, _ in t.examples]
                    for t in taskset.train_tasks}
    for spec in taskset.test_tasks:
        for seed in seeds:
            support, query = few_shot_split(spec, cfg.trainer.k_shots, seed)
            model = pretrained.copy()
            init_test_task(
                model, spec.name, seed,
                test_inputs=[np.array(inp) for inp, _ in
                             (support or spec.examples)],
                train_inputs_by_task=train_inputs)
            adapt(model, spec, support, trainer_config(cfg, seed))
            metrics = evaluate(model, spec.name, query)
            rows.append({"strategy": strategy_name, "seed": seed,
                         "task": spec.name, **metrics})
    return rows


def aggregate(rows: list[dict]) -> dict:
    """Mean and std of each metric per strategy, across all rows."""
    out: dict[str, dict] = {}
    strategies = sorted({r["strategy"] for r in rows})
    for strat in strategies:
        sub = [r for r in rows if r["strategy"] == strat]
        agg = {"num_rows": len(sub)}
        for metric in METRICS:
            vals = np.array([r[metric] for r in sub], dtype=float)
            agg[f"{metric}_mean"] = float(np.mean(vals))
            agg[f"{metric}_std"] = float(np.std(vals))
        out[strat] = agg
    return out


def write_results(out_dir: str, rows: list[dict]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    aggs = aggregate(rows)
    with open(os.path.join(out_dir, "results.json"), "w") as fh:
        json.dump({"rows": rows, "aggregates": aggs}, fh, indent=1,
                  sort_keys=True)
    cols = ["strategy", "seed", "task", *METRICS, "num_examples"]
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in cols})


def run_adapt_eval(cfg: ExperimentConfig, ckpt_dir: str,
                   out_dir: str | None = None) -> list[dict]:
    out_dir = out_dir or cfg.resolved_output_dir()
    model = load_checkpoint(ckpt_dir)
    taskset = build_taskset(cfg)
    rows = adapt_eval_rows(cfg, model, taskset, model.strategy.name,
                           cfg.trainer.seeds)
    write_results(out_dir, rows)
    return rows


def run_suite(cfg: ExperimentConfig,
              out_dir: str | None = None) -> list[dict]:
    """Full pretrain + adapt + eval for every strategy x seed on shared
    task data; rows land in results.csv/json ordered by aggregate metric."""
    out_dir = out_dir or cfg.resolved_output_dir()
    taskset = build_taskset(cfg)
    rows: list[dict] = []
    for name in cfg.suite.strategies:
        for seed in cfg.trainer.seeds:
            model = build_model(cfg, taskset, seed, name)
            pretrain(model, taskset, trainer_config(cfg, seed))
            rows.extend(adapt_eval_rows(cfg, model, taskset, name, [seed]))
    aggs = aggregate(rows)
    order = sorted(aggs, key=lambda s: -aggs[s]["sequence_exact_match_mean"])
    rows.sort(key=lambda r: (order.index(r["strategy"]), r["seed"],
                             r["task"]))
    write_results(out_dir, rows)
    return rows


def run_align(cfg: ExperimentConfig, ckpt_dir: str,
              out_dir: str | None = None):
    out_dir = out_dir or cfg.resolved_output_dir()
    model = load_checkpoint(ckpt_dir)
    taskset = build_taskset(cfg)
    report = gradient_alignment(model, taskset, cfg.trainer.probe_batch,
                                seed=cfg.trainer.seeds[0])
    os.makedirs(out_dir, exist_ok=True)
    report.to_csv(os.path.join(out_dir, "alignment.csv"))
    return report


def parameter_budget(method: str, d: int, r: int, num_skills: int,
                     num_tasks: int, num_heads: int,
                     num_sites: int) -> dict:
    from .adapters import PHASES, count_parameters
    budget = {}
    for phase in PHASES:
        per_layer = count_parameters(method, d, r, num_skills, num_tasks,
                                     num_heads, phase)
        budget[phase] = {"per_layer": per_layer,
                         "whole_model": per_layer * num_sites}
    return budget
