"""Experiment configuration: TOML file with [backbone] [strategy] [tasks]
[trainer] [suite] sections, dotted --set overrides, and a canonical copy
persisted into the output directory.
"""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OUTPUT_DIR_ENV = "SKILLROUTE_OUTPUT_DIR"


@dataclass
class BackboneSection:
    vocab_size: int = 0          # 0 = derive from the task vocabulary
    model_dim: int = 32
    num_layers: int = 2
    ff_dim: int = 0              # 0 = 4 * model_dim
    max_seq_len: int = 32
    seed: int = 0


@dataclass
class StrategySection:
    name: str = "poly"
    num_skills: int = 8
    num_heads: int = 8
    rank: int = 4
    parametrization: str = "lora"
    granularity: int = 1         # adapted sites sharing one routing tensor
    soup_k: int = 3
    tau_init: float = 1.0
    tau_final: float = 0.1


@dataclass
class TasksSection:
    source: str = "generator"    # "generator" | "jsonl"
    path: str = ""
    num_generator_skills: int = 8
    num_train_tasks: int = 20
    num_test_tasks: int = 5
    skills_per_task: int = 3
    examples_per_task: int = 256
    seq_len: int = 8
    symbols_per_skill: int = 4
    seed: int = 0


@dataclass
class TrainerSection:
    steps: int = 1000
    lr: float = 1e-2
    batch_size: int = 16
    eval_every: int = 50
    patience: int = 10
    adapt_steps: int = 100
    adapt_lr: float = 1e-2
    routing_lr: float = 0.0
    k_shots: int = 16
    val_fraction: float = 0.1
    align_every: int = 0
    probe_batch: int = 32
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class SuiteSection:
    strategies: list[str] = field(
        default_factory=lambda: ["shared", "poly", "poly-s"])


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    backbone: BackboneSection = field(default_factory=BackboneSection)
    strategy: StrategySection = field(default_factory=StrategySection)
    tasks: TasksSection = field(default_factory=TasksSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    suite: SuiteSection = field(default_factory=SuiteSection)

    def validated(self) -> "ExperimentConfig":
        if self.tasks.source not in ("generator", "jsonl"):
            raise ConfigurationError(
                f"unknown task source {self.tasks.source!r}")
        if self.tasks.source == "jsonl" and not self.tasks.path:
            raise ConfigurationError("jsonl task source needs tasks.path")
        if self.strategy.parametrization not in ("lora", "ia3"):
            raise ConfigurationError("parametrization must be lora or ia3")
        if self.trainer.steps < 0 or self.trainer.adapt_steps < 0:
            raise ConfigurationError("step counts must be nonnegative")
        if not self.trainer.seeds:
            raise ConfigurationError("need at least one seed")
        return self

    def resolved_output_dir(self) -> str:
        return os.environ.get(OUTPUT_DIR_ENV, self.output_dir)


def _coerce(value: str, template):
    if isinstance(template, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, list):
        inner = template[0] if template else 0
        return [_coerce(v, inner) for v in value.split(",") if v]
    return value


def _apply_section(section, data: dict, name: str):
    valid = {f.name for f in dataclasses.fields(section)}
    for key, value in data.items():
        if key not in valid:
            raise ConfigurationError(f"unknown key {name}.{key}")
        setattr(section, key, value)


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Build a validated config from an optional TOML file plus
    dotted key=value overrides (e.g. strategy.num_heads=4)."""
    cfg = ExperimentConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"invalid TOML in {path}: "
                                         f"{exc}") from exc
        for name in ("backbone", "strategy", "tasks", "trainer", "suite"):
            if name in data:
                _apply_section(getattr(cfg, name), data.pop(name), name)
        if "output_dir" in data:
            cfg.output_dir = data.pop("output_dir")
        if data:
            raise ConfigurationError(f"unknown top-level keys: {sorted(data)}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        parts = key.split(".")
        if len(parts) == 1 and parts[0] == "output_dir":
            cfg.output_dir = value
            continue
        if len(parts) != 2:
            raise ConfigurationError(f"override key {key!r} must be "
                                     "section.field")
        section = getattr(cfg, parts[0], None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigurationError(f"unknown section {parts[0]!r}")
        valid = {f.name for f in dataclasses.fields(section)}
        if parts[1] not in valid:
            raise ConfigurationError(f"unknown key {key!r}")
        setattr(section, parts[1], _coerce(value, getattr(section, parts[1])))
    return cfg.validated()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def save_config(cfg: ExperimentConfig, path: str) -> None:
    """Persist the canonical copy of a config as TOML."""
    lines = [f"output_dir = {_toml_value(cfg.output_dir)}", ""]
    for name in ("backbone", "strategy", "tasks", "trainer", "suite"):
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_toml_value(getattr(section, f.name))}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
