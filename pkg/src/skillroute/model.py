"""Assembled model: frozen backbone + skill inventory + routing + strategy."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import SkillInventory, init_inventory
from .backbone import FrozenBackbone, forward as backbone_forward, greedy_decode
from .errors import ConfigurationError
from .routing import (
    EVAL_MODE, RoutingGroupMap, RoutingState, TemperatureSchedule,
    resolve_site,
)
from .strategies import (
    ROUTING_FIXED_IDENTITY, ROUTING_FIXED_RANDOM, ROUTING_LEARNED,
    StrategyDescriptor, identity_allocation, random_allocation,
    trainable_params,
)
from .tensor import Tensor


@dataclass
class ModularModel:
    backbone: FrozenBackbone
    strategy: StrategyDescriptor
    inventory: SkillInventory
    routing: RoutingState | None
    train_tasks: list[str]
    phase: str = "pretrain"
    step: int = 0

    @staticmethod
    def build(backbone: FrozenBackbone, strategy: StrategyDescriptor,
              train_tasks: list[str], seed: int,
              parametrization: str = "lora", rank: int = 4,
              granularity: int = 1,
              schedule: TemperatureSchedule | None = None) -> "ModularModel":
        d = backbone.config.model_dim
        if d % strategy.num_heads != 0:
            raise ConfigurationError(
                f"{strategy.num_heads} heads do not divide model dim {d}")
        if backbone.config.ff % strategy.num_heads != 0:
            raise ConfigurationError(
                f"{strategy.num_heads} heads do not divide ff dim")
        sites = backbone.injection_sites(parametrization)
        inventory = init_inventory(sites, strategy.num_skills, parametrization,
                                   seed, rank=rank)
        task_index = {name: i for i, name in enumerate(train_tasks)}
        group_map = RoutingGroupMap(tuple(s.site_id for s in sites),
                                    period=granularity)
        if strategy.routing == ROUTING_LEARNED:
            routing = RoutingState.learned(
                len(train_tasks), strategy.num_skills, strategy.num_heads,
                group_map, task_index, seed + 1,
                schedule or TemperatureSchedule())
        elif strategy.routing == ROUTING_FIXED_IDENTITY:
            routing = RoutingState.fixed(identity_allocation(len(train_tasks)),
                                         group_map, task_index)
        elif strategy.routing == ROUTING_FIXED_RANDOM:
            routing = RoutingState.fixed(
                random_allocation(len(train_tasks), strategy.num_skills,
                                  seed + 2), group_map, task_index)
        else:
            routing = None
        return ModularModel(backbone, strategy, inventory, routing,
                            list(train_tasks))

    def resolve_adapters(self, task: str, mode: str = EVAL_MODE,
                         rng: np.random.Generator | None = None) -> dict:
        cache: dict[int, Tensor] = {}
        return {site.site_id: resolve_site(self.inventory, self.routing, site,
                                           task, mode, rng, self.step, cache)
                for site in self.inventory.sites}

    def forward(self, enc_ids, dec_in, labels, task: str,
                mode: str = EVAL_MODE, rng: np.random.Generator | None = None):
        adapters = self.resolve_adapters(task, mode, rng)
        return backbone_forward(self.backbone, adapters, enc_ids, dec_in,
                                labels)

    def decode(self, enc_ids, task: str, max_len: int) -> list[list[int]]:
        adapters = self.resolve_adapters(task, EVAL_MODE, None)
        return greedy_decode(self.backbone, adapters, enc_ids, max_len)

    def trainable(self, phase: str | None = None,
                  task: str | None = None) -> list[Tensor]:
        return trainable_params(self.strategy, self.inventory, self.routing,
                                phase or self.phase, task=task)

    def copy(self) -> "ModularModel":
        """Deep copy of mutable state; the frozen backbone is shared."""
        routing = None
        if self.routing is not None:
            r = self.routing
            routing = replace(
                r,
                logits={g: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                        for g, t in r.logits.items()},
                task_index=dict(r.task_index),
                test_rows={k: Tensor(t.data.copy(),
                                     requires_grad=t.requires_grad)
                           for k, t in r.test_rows.items()},
                fixed_alloc=None if r.fixed_alloc is None
                else r.fixed_alloc.copy())
        return ModularModel(self.backbone, self.strategy,
                            self.inventory.copy(), routing,
                            list(self.train_tasks), self.phase, self.step)
