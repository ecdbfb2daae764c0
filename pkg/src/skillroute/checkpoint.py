"""Checkpoint directory layout: backbone.bin, inventory.bin, routing.json,
manifest.json. Binary files are concatenated little-endian float64 arrays;
the manifest records names, shapes, offsets, and configs so loading is
bit-exact. The manifest is the only file carrying a timestamp.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict

import numpy as np

from .backbone import BackboneConfig, InjectionSite, build_backbone
from .adapters import SkillInventory
from .errors import DataError
from .model import ModularModel
from .routing import RoutingGroupMap, RoutingState, TemperatureSchedule
from .strategies import StrategyDescriptor
from .tensor import Tensor


def _write_flat(path: str, arrays: list[tuple[str, np.ndarray]]):
    entries = []
    offset = 0
    with open(path, "wb") as fh:
        for name, arr in arrays:
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(data.tobytes())
            entries.append({"name": name, "shape": list(arr.shape),
                            "offset": offset})
            offset += data.size
    return entries


def _read_flat(path: str, entries: list[dict]) -> dict[str, np.ndarray]:
    raw = np.fromfile(path, dtype="<f8")
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = raw[e["offset"]:e["offset"] + n].reshape(e["shape"])
    return out


def save_checkpoint(path: str, model: ModularModel) -> None:
    os.makedirs(path, exist_ok=True)
    bb_entries = _write_flat(
        os.path.join(path, "backbone.bin"),
        [(name, model.backbone.params[name].data)
         for name in sorted(model.backbone.params)])
    inv = model.inventory
    inv_arrays = []
    for site in inv.sites:
        for name in sorted(inv.stacks[site.site_id]):
            inv_arrays.append((f"{site.site_id}/{name}",
                               inv.stacks[site.site_id][name].data))
    inv_entries = _write_flat(os.path.join(path, "inventory.bin"), inv_arrays)

    routing_blob = None
    if model.routing is not None:
        r = model.routing
        routing_blob = {
            "kind": r.kind,
            "num_skills": r.num_skills,
            "num_heads": r.num_heads,
            "period": r.group_map.period,
            "site_ids": list(r.group_map.site_ids),
            "task_index": r.task_index,
            "schedule": asdict(r.schedule),
            "logits": {str(g): t.data.tolist() for g, t in r.logits.items()},
            "fixed_alloc": None if r.fixed_alloc is None
            else r.fixed_alloc.tolist(),
            "test_rows": {f"{g}|{task}": t.data.tolist()
                          for (g, task), t in r.test_rows.items()},
        }
    with open(os.path.join(path, "routing.json"), "w") as fh:
        json.dump(routing_blob, fh, indent=1, sort_keys=True)

    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "backbone": {"config": asdict(model.backbone.config),
                     "arrays": bb_entries,
                     "fingerprint": model.backbone.weight_fingerprint()},
        "inventory": {"parametrization": inv.parametrization,
                      "num_skills": inv.num_skills,
                      "rank": inv.rank,
                      "sites": [asdict(s) for s in inv.sites],
                      "arrays": inv_entries},
        "strategy": {**asdict(model.strategy),
                     "pretrain_trainable":
                         sorted(model.strategy.pretrain_trainable),
                     "finetune_trainable":
                         sorted(model.strategy.finetune_trainable)},
        "train_tasks": model.train_tasks,
        "phase": model.phase,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str) -> ModularModel:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    bb_cfg = BackboneConfig(**manifest["backbone"]["config"])
    backbone = build_backbone(bb_cfg)
    weights = _read_flat(os.path.join(path, "backbone.bin"),
                         manifest["backbone"]["arrays"])
    for name, arr in weights.items():
        backbone.params[name].data = arr
    if backbone.weight_fingerprint() != manifest["backbone"]["fingerprint"]:
        raise DataError("backbone fingerprint mismatch on load")

    inv_meta = manifest["inventory"]
    sites = [InjectionSite(**s) for s in inv_meta["sites"]]
    arrays = _read_flat(os.path.join(path, "inventory.bin"),
                        inv_meta["arrays"])
    stacks: dict[str, dict[str, Tensor]] = {}
    for key, arr in arrays.items():
        sid, name = key.rsplit("/", 1)
        stacks.setdefault(sid, {})[name] = Tensor(arr, requires_grad=True)
    inventory = SkillInventory(inv_meta["parametrization"],
                               inv_meta["num_skills"], inv_meta["rank"],
                               sites, stacks)

    with open(os.path.join(path, "routing.json")) as fh:
        blob = json.load(fh)
    routing = None
    if blob is not None:
        gm = RoutingGroupMap(tuple(blob["site_ids"]), period=blob["period"])
        routing = RoutingState(
            blob["num_skills"], blob["num_heads"], blob["kind"], gm,
            dict(blob["task_index"]),
            logits={int(g): Tensor(np.array(v), requires_grad=True)
                    for g, v in blob["logits"].items()},
            fixed_alloc=None if blob["fixed_alloc"] is None
            else np.array(blob["fixed_alloc"]),
            schedule=TemperatureSchedule(**blob["schedule"]))
        for key, v in blob["test_rows"].items():
            g, task = key.split("|", 1)
            routing.test_rows[(int(g), task)] = Tensor(np.array(v),
                                                       requires_grad=True)

    strategy = StrategyDescriptor(**{
        **manifest["strategy"],
        "pretrain_trainable": frozenset(manifest["strategy"]
                                        ["pretrain_trainable"]),
        "finetune_trainable": frozenset(manifest["strategy"]
                                        ["finetune_trainable"])})
    return ModularModel(backbone, strategy, inventory, routing,
                        list(manifest["train_tasks"]),
                        phase=manifest["phase"])
