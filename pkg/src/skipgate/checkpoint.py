"""Checkpoint container: a single-line JSON header (model config, optional
routing plan, parameter manifest with name/shape/offset/trainable) followed by
raw little-endian float32 parameter blocks in manifest order. Offsets are
relative to the first byte after the header's newline."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CheckpointError, PlanError
from .model import Model, ModelConfig, MoESettings, param_shapes
from .moe import ExpertSkipRouters
from .routing import RoutePlan, RouterState, init_routers
from .tensor import Tensor

FORMAT = "skipgate-checkpoint"
VERSION = 1


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    moe = d.pop("moe", None)
    cfg = ModelConfig(**d, moe=MoESettings(**moe) if moe else None)
    cfg.validate()
    return cfg


@dataclass
class CheckpointBundle:
    model: Model
    plan: RoutePlan | None
    routers: dict[int, RouterState] | None
    expert_routers: ExpertSkipRouters | None
    meta: dict


def save_checkpoint(
    path,
    model: Model,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers: ExpertSkipRouters | None = None,
    meta: dict | None = None,
) -> None:
    entries: list[tuple[str, Tensor, bool]] = []
    for name, _ in param_shapes(model.cfg):
        entries.append((name, model.params[name], False))
    if routers:
        for li in sorted(routers):
            entries.append((f"router.{li}.W", routers[li].W, True))
    if expert_routers is not None:
        for li in sorted(expert_routers.layers):
            for e, w in enumerate(expert_routers.layers[li]):
                entries.append((f"expert_router.{li}.{e}.W", w, True))

    manifest = []
    offset = 0
    for name, t, trainable in entries:
        manifest.append(
            {"name": name, "shape": list(t.data.shape), "offset": offset, "trainable": trainable}
        )
        offset += t.data.nbytes
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": config_to_dict(model.cfg),
        "plan": plan.to_dict() if plan else None,
        "expert_skip": (
            {"tau": expert_routers.tau, "layers": sorted(expert_routers.layers)}
            if expert_routers
            else None
        ),
        "meta": meta or {},
        "params": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t, _ in entries:
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> CheckpointBundle:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"not a {FORMAT} file: {path}")
    cfg = config_from_dict(header["config"])

    tensors: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        start = entry["offset"]
        if start + size > len(blob):
            raise CheckpointError(f"checkpoint truncated: {entry['name']} exceeds payload")
        tensors[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=size // 4, offset=start)
            .reshape(shape)
            .copy()
        )

    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"parameter {name} has shape {tensors[name].shape}, expected {shape}"
            )
        params[name] = Tensor(tensors[name])
    model = Model(cfg, params)

    plan = RoutePlan.from_dict(header["plan"]) if header.get("plan") else None
    routers = None
    if plan is not None:
        plan.validate(cfg.n_layers)
        routers = init_routers(model, plan)
        for li, router in routers.items():
            name = f"router.{li}.W"
            if name not in tensors:
                raise PlanError(f"plan routes layer {li} but {name} is absent from checkpoint")
            if tensors[name].shape != router.W.data.shape:
                raise PlanError(
                    f"{name} has shape {tensors[name].shape}, model needs "
                    f"{router.W.data.shape}"
                )
            router.W.data[...] = tensors[name]

    expert_routers = None
    if header.get("expert_skip"):
        info = header["expert_skip"]
        expert_routers = ExpertSkipRouters(model, tau=info["tau"], layers=info["layers"])
        for li in expert_routers.layers:
            for e, w in enumerate(expert_routers.layers[li]):
                name = f"expert_router.{li}.{e}.W"
                if name not in tensors:
                    raise PlanError(f"expert skip plan needs {name}, absent from checkpoint")
                w.data[...] = tensors[name]

    return CheckpointBundle(model, plan, routers, expert_routers, header.get("meta", {}))
