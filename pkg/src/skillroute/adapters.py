"""Skill inventories: stacked adapter parameters in LoRA or IA3 form,
averaging, and the closed-form parameter accountant.

Each site stores its |S| skills as one stacked tensor of shape (|S|, P)
with P the flat per-skill size; row i is skill i flattened row-major.
This layout makes head-wise mixing a single einsum (see tensor.mix_heads)
while per-skill views remain cheap slices.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .backbone import IA3_KINDS, InjectionSite, LORA_KINDS
from .errors import ConfigurationError
from .tensor import Tensor

METHODS = ("shared", "private-mu", "random-mu", "poly", "poly-mu", "poly-s",
           "mhr-mu", "poly-z", "poly-s-z", "adapter-soup")
PHASES = ("pretrain", "finetune", "inference")


@dataclass
class SkillInventory:
    parametrization: str               # "lora" | "ia3"
    num_skills: int
    rank: int                          # 0 for ia3
    sites: list[InjectionSite]
    stacks: dict[str, dict[str, Tensor]]

    def tensors(self) -> list[Tensor]:
        out = []
        for site in self.sites:
            for name in sorted(self.stacks[site.site_id]):
                out.append(self.stacks[site.site_id][name])
        return out

    def skill_view(self, site_id: str, name: str, skill: int) -> np.ndarray:
        return self.stacks[site_id][name].data[skill]

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def copy(self) -> "SkillInventory":
        stacks = {
            sid: {name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                  for name, t in names.items()}
            for sid, names in self.stacks.items()
        }
        return replace(self, stacks=stacks)


def _check_pairing(sites: list[InjectionSite], parametrization: str) -> None:
    allowed = {"lora": LORA_KINDS, "ia3": IA3_KINDS}.get(parametrization)
    if allowed is None:
        raise ConfigurationError(f"unknown parametrization {parametrization!r}")
    for site in sites:
        if site.kind not in allowed:
            raise ConfigurationError(
                f"site kind {site.kind!r} not adaptable with {parametrization}")


def init_inventory(sites: list[InjectionSite], num_skills: int,
                   parametrization: str, seed: int,
                   rank: int = 4) -> SkillInventory:
    """Deterministic per-seed inventory: LoRA A ~ N(0, 1/sqrt(r)), B = 0;
    IA3 all-ones (the multiplicative identity)."""
    if num_skills < 1:
        raise ConfigurationError("need at least one skill")
    _check_pairing(sites, parametrization)
    rng = np.random.default_rng(seed)
    stacks: dict[str, dict[str, Tensor]] = {}
    for site in sites:
        if parametrization == "lora":
            if rank < 1:
                raise ConfigurationError("lora rank must be >= 1")
            a = rng.normal(scale=1.0 / np.sqrt(rank),
                           size=(num_skills, site.dim * rank))
            b = np.zeros((num_skills, site.dim * rank))
            stacks[site.site_id] = {"A": Tensor(a, requires_grad=True),
                                    "B": Tensor(b, requires_grad=True)}
        else:
            stacks[site.site_id] = {
                "l": Tensor(np.ones((num_skills, site.dim)),
                            requires_grad=True)}
    return SkillInventory(parametrization, num_skills,
                          rank if parametrization == "lora" else 0,
                          list(sites), stacks)


def average_inventory(inv: SkillInventory) -> SkillInventory:
    """Arithmetic mean of every parameter tensor across skills; |S| becomes 1."""
    if inv.num_skills < 1 or not inv.stacks:
        raise ConfigurationError("cannot average an empty inventory")
    stacks = {
        sid: {name: Tensor(t.data.mean(axis=0, keepdims=True),
                           requires_grad=True)
              for name, t in names.items()}
        for sid, names in inv.stacks.items()
    }
    return replace(inv, num_skills=1, stacks=stacks)


def count_parameters(method: str, d: int, r: int, num_skills: int,
                     num_tasks: int, num_heads: int, phase: str) -> int:
    """Per-adapted-layer trainable parameter count for each method and phase.

    LoRA convention over a d x d linear map: one adapter costs 2*d*r; learned
    routing adds |T|*|S|*h logits per layer during pre-training and |S|*h per
    test task during fine-tuning. full-ft is the d*d reference row.
    """
    for val, name in ((d, "d"), (r, "r"), (num_skills, "skills"),
                      (num_tasks, "tasks"), (num_heads, "heads")):
        if val < 1:
            raise ConfigurationError(f"{name} must be positive, got {val}")
    if phase not in PHASES:
        raise ConfigurationError(f"unknown phase {phase!r}; valid: {PHASES}")
    method = method.lower()
    adapter = 2 * d * r
    S, T, h = num_skills, num_tasks, num_heads
    table: dict[str, tuple[int, int, int]] = {
        "shared": (adapter, adapter, adapter),
        "poly": (adapter * S + T * S, adapter * S + S, adapter),
        "poly-mu": (adapter * S + T * S, adapter, adapter),
        "poly-s": (adapter * S + T * S * h, adapter * S + S * h, adapter),
        "mhr-mu": (adapter * S + T * S * h, adapter, adapter),
        "poly-z": (adapter * S + T * S, S, adapter),
        "poly-s-z": (adapter * S + T * S * h, S * h, adapter),
        "private-mu": (adapter * S, adapter, adapter),
        "random-mu": (adapter * S, adapter, adapter),
        "adapter-soup": (adapter * T, adapter, adapter),
        "full-ft": (d * d, d * d, d * d),
    }
    if method not in table:
        raise ConfigurationError(
            f"unknown method {method!r}; valid: {sorted(table)}")
    return table[method][PHASES.index(phase)]
