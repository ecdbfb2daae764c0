"""The method zoo: declarative recipes for how skills combine, which
parameters train in each phase, and how the test-task adapter is initialized.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .adapters import SkillInventory, average_inventory
from .errors import ConfigurationError
from .routing import RoutingState
from .tensor import Tensor

if TYPE_CHECKING:
    from .model import ModularModel

STRATEGY_NAMES = ("shared", "private-mu", "random-mu", "poly", "poly-mu",
                  "poly-s", "mhr-mu", "poly-z", "poly-s-z", "adapter-soup")

ROUTING_NONE = "none"
ROUTING_LEARNED = "learned"
ROUTING_FIXED_IDENTITY = "fixed-identity"
ROUTING_FIXED_RANDOM = "fixed-random"


@dataclass(frozen=True)
class StrategyDescriptor:
    name: str
    num_skills: int
    num_heads: int
    routing: str
    pretrain_trainable: frozenset[str]     # subset of {"skills", "routing"}
    finetune_trainable: frozenset[str]
    test_init: str                         # fresh-routing | average | soup | keep
    soup_k: int = 3


def build_strategy(name: str, num_tasks: int, num_skills: int = 8,
                   num_heads: int = 8, soup_k: int = 3) -> StrategyDescriptor:
    """Resolve a method name into a full recipe. num_heads only applies to
    multi-head methods; single-head methods always use h = 1."""
    name = name.lower()
    if num_tasks < 1:
        raise ConfigurationError("need at least one task")
    both = frozenset({"skills", "routing"})
    skills = frozenset({"skills"})
    route_only = frozenset({"routing"})
    if name == "shared":
        return StrategyDescriptor(name, 1, 1, ROUTING_NONE, skills, skills,
                                  "keep")
    if name == "private-mu":
        if num_skills != num_tasks:
            raise ConfigurationError(
                f"private-mu requires |S| == |T| ({num_skills} != {num_tasks})")
        return StrategyDescriptor(name, num_tasks, 1, ROUTING_FIXED_IDENTITY,
                                  skills, skills, "average")
    if name == "random-mu":
        return StrategyDescriptor(name, num_skills, 1, ROUTING_FIXED_RANDOM,
                                  skills, skills, "average")
    if name == "poly":
        return StrategyDescriptor(name, num_skills, 1, ROUTING_LEARNED, both,
                                  both, "fresh-routing")
    if name == "poly-mu":
        return StrategyDescriptor(name, num_skills, 1, ROUTING_LEARNED, both,
                                  skills, "average")
    if name == "poly-s":
        return StrategyDescriptor(name, num_skills, num_heads, ROUTING_LEARNED,
                                  both, both, "fresh-routing")
    if name == "mhr-mu":
        return StrategyDescriptor(name, num_skills, num_heads, ROUTING_LEARNED,
                                  both, skills, "average")
    if name == "poly-z":
        return StrategyDescriptor(name, num_skills, 1, ROUTING_LEARNED, both,
                                  route_only, "fresh-routing")
    if name == "poly-s-z":
        return StrategyDescriptor(name, num_skills, num_heads, ROUTING_LEARNED,
                                  both, route_only, "fresh-routing")
    if name == "adapter-soup":
        if soup_k > num_tasks:
            raise ConfigurationError(
                f"soup_k {soup_k} exceeds number of tasks {num_tasks}")
        return StrategyDescriptor(name, num_tasks, 1, ROUTING_FIXED_IDENTITY,
                                  skills, skills, "soup", soup_k=soup_k)
    raise ConfigurationError(
        f"unknown strategy {name!r}; valid: {sorted(STRATEGY_NAMES)}")


def identity_allocation(num_tasks: int) -> np.ndarray:
    return np.eye(num_tasks)


def random_allocation(num_tasks: int, num_skills: int,
                      seed: int) -> np.ndarray:
    """Binary allocation with exactly floor(|S|/2) active skills per task."""
    if num_skills < 2:
        raise ConfigurationError("random allocation needs >= 2 skills")
    rng = np.random.default_rng(seed)
    alloc = np.zeros((num_tasks, num_skills))
    k = num_skills // 2
    for t in range(num_tasks):
        alloc[t, rng.choice(num_skills, size=k, replace=False)] = 1.0
    return alloc


def trainable_params(strategy: StrategyDescriptor, inventory: SkillInventory,
                     routing: RoutingState | None, phase: str,
                     task: str | None = None) -> list[Tensor]:
    """Ordered trainable tensors for the given phase (and test task, when
    fine-tuning a routed strategy)."""
    if phase == "pretrain":
        wanted = strategy.pretrain_trainable
    elif phase == "finetune":
        wanted = strategy.finetune_trainable
    else:
        raise ConfigurationError(f"unknown phase {phase!r}")
    params: list[Tensor] = []
    if "skills" in wanted:
        params.extend(inventory.tensors())
    if "routing" in wanted and routing is not None and routing.kind == "learned":
        if phase == "finetune":
            if task is None:
                raise ConfigurationError("finetune routing census needs a task")
            params.extend(routing.routing_tensors(task))
        else:
            params.extend(routing.routing_tensors())
    return params


def _task_embeddings(model: "ModularModel", inputs_by_task: dict[str, list],
                     max_examples: int = 32) -> dict[str, np.ndarray]:
    """Mean-pooled bare-backbone encoder embedding per task."""
    from .backbone import encode
    from .tensor import no_grad

    out = {}
    for name, inputs in inputs_by_task.items():
        vecs = []
        with no_grad():
            for ids in inputs[:max_examples]:
                enc = encode(model.backbone, {}, np.asarray(ids)[None, :])
                vecs.append(enc.data[0].mean(axis=0))
        out[name] = np.mean(vecs, axis=0)
    return out


def soup_similar_tasks(model: "ModularModel", test_inputs: list,
                       train_inputs_by_task: dict[str, list],
                       k: int) -> list[str]:
    """Top-k training tasks by cosine similarity of mean encoder embeddings.

    Ties break toward the lower task index (registration order).
    """
    names = list(train_inputs_by_task)
    if k > len(names):
        raise ConfigurationError(f"soup_k {k} exceeds {len(names)} train tasks")
    embs = _task_embeddings(model, train_inputs_by_task)
    test_emb = _task_embeddings(model, {"__test__": test_inputs})["__test__"]

    def cosine(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 0.0
        return float(a @ b / (na * nb))

    sims = np.array([cosine(embs[n], test_emb) for n in names])
    order = np.lexsort((np.arange(len(names)), -sims))
    return [names[i] for i in order[:k]]


def init_test_task(model: "ModularModel", task: str, seed: int,
                   test_inputs: list | None = None,
                   train_inputs_by_task: dict[str, list] | None = None) -> None:
    """Prepare a pre-trained model for few-shot adaptation on one test task.

    Mutates the model in place per the strategy recipe: fresh routing row,
    averaged single-skill inventory, or a soup of similar tasks' skills.
    """
    strat = model.strategy
    model.phase = "finetune"
    if strat.test_init == "fresh-routing":
        model.routing.register_test_task(task, seed)
        return
    if strat.test_init == "keep":
        return
    if strat.test_init == "average":
        model.inventory = average_inventory(model.inventory)
        model.routing = None
        return
    if strat.test_init == "soup":
        if test_inputs is None or train_inputs_by_task is None:
            raise ConfigurationError("adapter-soup init needs task inputs")
        chosen = soup_similar_tasks(model, test_inputs, train_inputs_by_task,
                                    strat.soup_k)
        rows = [model.routing.task_index[n] for n in chosen]
        stacks = {
            sid: {name: Tensor(t.data[rows].mean(axis=0, keepdims=True),
                               requires_grad=True)
                  for name, t in names.items()}
            for sid, names in model.inventory.stacks.items()
        }
        inv = model.inventory
        model.inventory = SkillInventory(inv.parametrization, 1, inv.rank,
                                         inv.sites, stacks)
        model.routing = None
        return
    raise ConfigurationError(f"unknown test-init rule {strat.test_init!r}")
