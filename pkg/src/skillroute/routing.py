"""Task-skill routing: logits storage, Gumbel-sigmoid relaxation, per-head
normalization, and parameter-space combination of skills.

A routing group owns one logits tensor Z of shape (|T|, |S|*h); adapted
sites are assigned to groups in model order with a configurable period, so
period 1 is one Z per adapted site and period = #sites is a single shared Z.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import SkillInventory
from .backbone import Ia3Delta, InjectionSite, LoraDelta
from .errors import ConfigurationError, NumericError, RoutingError
from .tensor import (
    Tensor, add, div, mix_heads, mul, reshape, scale, sigmoid, slice_rows,
    tsum,
)

TRAIN_MODE = "train-sampled"
EVAL_MODE = "eval-deterministic"

Z_INIT_SCALE = 1e-3


@dataclass(frozen=True)
class TemperatureSchedule:
    """Linear Gumbel-sigmoid temperature anneal over pre-training."""
    tau_init: float = 1.0
    tau_final: float = 0.1
    anneal_steps: int = 1000

    def __post_init__(self):
        if self.tau_init <= 0 or self.tau_final <= 0:
            raise ConfigurationError("temperatures must be positive")

    def at(self, step: int) -> float:
        if self.anneal_steps <= 0:
            return self.tau_final
        frac = min(max(step, 0), self.anneal_steps) / self.anneal_steps
        return self.tau_init + frac * (self.tau_final - self.tau_init)


@dataclass(frozen=True)
class RoutingGroupMap:
    site_ids: tuple[str, ...]
    period: int = 1

    def __post_init__(self):
        if self.period < 1 or self.period > max(len(self.site_ids), 1):
            raise ConfigurationError(
                f"group period {self.period} invalid for "
                f"{len(self.site_ids)} sites")

    def group_of(self, site_id: str) -> int:
        try:
            return self.site_ids.index(site_id) // self.period
        except ValueError:
            raise RoutingError(f"site {site_id!r} is not adapted") from None

    @property
    def num_groups(self) -> int:
        return -(-len(self.site_ids) // self.period)


def relax(z_row: Tensor, mode: str, rng: np.random.Generator | None,
          tau: float) -> Tensor:
    """Gumbel-sigmoid relaxation of routing logits to (0, 1).

    Train mode samples sigmoid(z / tau + g1 - g2) with i.i.d. standard
    Gumbel draws; eval mode is the deterministic sigmoid(z).
    """
    if tau <= 0:
        raise ConfigurationError("relaxation temperature must be positive")
    if not np.all(np.isfinite(z_row.data)):
        raise NumericError("non-finite routing logits")
    if mode == EVAL_MODE:
        return sigmoid(z_row)
    if mode != TRAIN_MODE:
        raise ConfigurationError(f"unknown routing mode {mode!r}")
    if rng is None:
        raise ConfigurationError("train-mode relaxation needs an rng")
    # logits are sharpened by 1/tau while the Gumbel-difference noise keeps
    # unit scale, so annealing tau drives samples toward binary gates
    noise = rng.gumbel(size=z_row.shape) - rng.gumbel(size=z_row.shape)
    return sigmoid(add(scale(z_row, 1.0 / tau), Tensor(noise)))


def normalize(z_hat: Tensor) -> Tensor:
    """Per-head-column normalization to convex mixing weights.

    Each column is divided by its exact sum, so the result is invariant to
    rescaling a column; an all-zero column falls back to the uniform 1/|S|
    weighting so averaging semantics are preserved.
    """
    if np.any(z_hat.data < 0):
        raise ConfigurationError("relaxed routing weights must be nonnegative")
    S = z_hat.shape[0]
    col = tsum(z_hat, axis=0, keepdims=True)
    zero_cols = col.data[0] == 0.0
    if not zero_cols.any():
        return div(z_hat, col)
    # divide zero columns by one (their entries are all zero anyway) and
    # overwrite them with the uniform weighting
    safe = add(col, Tensor(zero_cols[None, :].astype(np.float64)))
    uniform = np.full(z_hat.shape, 1.0 / S) * zero_cols[None, :]
    return add(div(z_hat, safe), Tensor(uniform))


def combine_poly(stack: Tensor, alpha: Tensor) -> Tensor:
    """Single-head convex combination of stacked skills: sum_i alpha_i * skill_i."""
    if alpha.data.ndim == 1:
        alpha = reshape(alpha, (alpha.shape[0], 1))
    if alpha.shape[1] != 1:
        raise ConfigurationError("combine_poly expects a single head column")
    return mix_heads(alpha, stack, 1)


def combine_mhr(stack: Tensor, alpha: Tensor, num_heads: int) -> Tensor:
    """Multi-head combination: head k mixes the k-th row-slices with column k."""
    if stack.shape[1] % num_heads != 0:
        raise ConfigurationError(
            f"{num_heads} heads do not divide flat size {stack.shape[1]}")
    return mix_heads(alpha, stack, num_heads)


@dataclass
class RoutingState:
    """Learned or fixed routing over a task registry.

    Learned routing keeps one trainable logits tensor per group; fixed
    routing (Private-mu / Random-mu / AdapterSoup pre-training) keeps a
    frozen binary allocation shared by all groups.
    """
    num_skills: int
    num_heads: int
    kind: str                       # "learned" | "fixed"
    group_map: RoutingGroupMap
    task_index: dict[str, int]
    logits: dict[int, Tensor] = field(default_factory=dict)
    fixed_alloc: np.ndarray | None = None
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    test_rows: dict[tuple[int, str], Tensor] = field(default_factory=dict)

    @staticmethod
    def learned(num_tasks: int, num_skills: int, num_heads: int,
                group_map: RoutingGroupMap, task_index: dict[str, int],
                seed: int,
                schedule: TemperatureSchedule | None = None) -> "RoutingState":
        rng = np.random.default_rng(seed)
        logits = {
            g: Tensor(rng.uniform(-Z_INIT_SCALE, Z_INIT_SCALE,
                                  size=(num_tasks, num_skills * num_heads)),
                      requires_grad=True)
            for g in range(group_map.num_groups)
        }
        return RoutingState(num_skills, num_heads, "learned", group_map,
                            dict(task_index), logits=logits,
                            schedule=schedule or TemperatureSchedule())

    @staticmethod
    def fixed(alloc: np.ndarray, group_map: RoutingGroupMap,
              task_index: dict[str, int]) -> "RoutingState":
        alloc = np.asarray(alloc, dtype=np.float64)
        if alloc.ndim != 2 or (alloc.sum(axis=1) == 0).any():
            raise ConfigurationError("fixed allocation needs >=1 skill per task")
        return RoutingState(alloc.shape[1], 1, "fixed", group_map,
                            dict(task_index), fixed_alloc=alloc)

    def register_test_task(self, task: str, seed: int) -> None:
        """Fresh randomly initialized routing rows for a held-out task."""
        if self.kind != "learned":
            raise RoutingError("fixed routing cannot register test tasks")
        rng = np.random.default_rng(seed)
        for g in range(self.group_map.num_groups):
            self.test_rows[(g, task)] = Tensor(
                rng.uniform(-Z_INIT_SCALE, Z_INIT_SCALE,
                            size=(1, self.num_skills * self.num_heads)),
                requires_grad=True)

    def routing_tensors(self, task: str | None = None) -> list[Tensor]:
        if task is not None and any(k[1] == task for k in self.test_rows):
            return [self.test_rows[(g, task)]
                    for g in range(self.group_map.num_groups)]
        return [self.logits[g] for g in sorted(self.logits)]

    def _z_row(self, task: str, group: int) -> Tensor:
        if (group, task) in self.test_rows:
            row = self.test_rows[(group, task)]
        elif task in self.task_index:
            z = self.logits[group]
            row = slice_rows(z, self.task_index[task], z.shape[0])
        else:
            raise RoutingError(f"unknown task {task!r}")
        return reshape(row, (self.num_skills, self.num_heads))

    def alpha_for_group(self, task: str, group: int, mode: str,
                        rng: np.random.Generator | None,
                        step: int = 0) -> Tensor:
        """Mixing weights (|S|, h) for one (task, group); fresh Gumbel noise
        is drawn here, so callers must cache per forward pass."""
        if self.kind == "fixed":
            if task not in self.task_index:
                raise RoutingError(f"unknown task {task!r}")
            row = self.fixed_alloc[self.task_index[task]]
            return Tensor((row / row.sum())[:, None])
        z = self._z_row(task, group)
        return normalize(relax(z, mode, rng, self.schedule.at(step)))


def resolve_site(inventory: SkillInventory, routing: RoutingState | None,
                 site: InjectionSite, task: str, mode: str,
                 rng: np.random.Generator | None, step: int,
                 alpha_cache: dict[int, Tensor]):
    """Relax -> normalize -> combine for one site; returns the adapter delta.

    Sites in the same routing group within one forward pass share the cached
    mixing weights (one Gumbel sample per group per pass).
    """
    sid = site.site_id
    if routing is None:
        alpha = Tensor(np.full((inventory.num_skills, 1),
                               1.0 / inventory.num_skills))
        heads = 1
    else:
        group = routing.group_map.group_of(sid)
        if group not in alpha_cache:
            alpha_cache[group] = routing.alpha_for_group(task, group, mode,
                                                         rng, step)
        alpha = alpha_cache[group]
        heads = routing.num_heads
    stacks = inventory.stacks[sid]
    if inventory.parametrization == "lora":
        d, r = site.dim, inventory.rank
        a_flat = combine_mhr(stacks["A"], alpha, heads)
        b_flat = combine_mhr(stacks["B"], alpha, heads)
        return LoraDelta(reshape(a_flat, (d, r)), reshape(b_flat, (d, r)),
                         1.0 / r)
    l_flat = combine_mhr(stacks["l"], alpha, heads)
    return Ia3Delta(l_flat)
