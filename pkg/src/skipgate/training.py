"""Router-only optimization: task loss plus a scaled capacity hinge, with the
backbone frozen and verified frozen; also the brief dense pretraining used to
give the toy backbone structure, and the (learning rate, lambda) grid search.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import PAD, Dataset, batch_iter
from .errors import ConfigError
from .model import Model
from .moe import ExpertSkipRouters
from .routing import RoutePlan, RouterState, TrainMask, train_forward
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lam: float = 0.1  # scale on the capacity hinge
    target_capacity: float = 0.5
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    lr_grid: tuple = (1e-5, 2e-5, 5e-5, 1e-4, 2e-4)
    lambda_grid: tuple = (0.0, 0.1, 0.01, 0.001)
    max_windows: int = 5000
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    backbone_check_every: int = 1  # 0 disables the per-step frozen check (still checked at end)


@dataclass
class LossBreakdown:
    step: int
    total: float
    task: float
    mod: float
    capacity: float
    per_layer_capacity: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "task_loss": self.task,
                "mod_loss": self.mod,
                "total_loss": self.total,
                "capacity": self.capacity,
                "per_layer_capacity": self.per_layer_capacity,
            },
            sort_keys=True,
        )


class Adam:
    """Adaptive moment estimation with bias correction, no weight decay."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(np.float32)


def mod_loss(masks: list[TrainMask], target_capacity: float) -> tuple[Tensor, float]:
    """Capacity hinge ReLU(c - s), with c the fraction of kept decisions over
    every routed unit in the batch, computed on the straight-through mask
    tensors so the piecewise-constant count stays differentiable.

    Returns the hinge tensor and the measured (binary) capacity.
    """
    if not masks:
        raise ConfigError("mod_loss needs at least one routed layer")
    total = sum(tm.n_decisions for tm in masks)
    kept_t: Tensor | None = None
    for tm in masks:
        for mt in tm.mask_tensors:
            s = T.tsum(mt)
            kept_t = s if kept_t is None else T.add(kept_t, s)
    cap_t = T.scale(kept_t, 1.0 / total)
    hinge = T.relu(T.add_scalar(cap_t, -target_capacity))
    measured = sum(tm.n_kept for tm in masks) / total
    return hinge, measured


def collect_router_params(
    routers: dict[int, RouterState] | None, expert_routers: ExpertSkipRouters | None
) -> list[Tensor]:
    params: list[Tensor] = []
    if routers:
        params.extend(routers[li].W for li in sorted(routers))
    if expert_routers is not None:
        params.extend(expert_routers.params())
    return params


def _backbone_digest(model: Model) -> int:
    h = 0
    for name in sorted(model.params):
        h = zlib.crc32(model.params[name].data.tobytes(), h)
    return h


def train_routers(
    model: Model,
    data: Dataset,
    cfg: TrainConfig,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers: ExpertSkipRouters | None = None,
    log_path=None,
) -> list[LossBreakdown]:
    """Optimize only the router weights against L_task + lambda * hinge.

    The backbone is frozen two ways: its tensors carry requires_grad=False so
    no gradient accumulates, and the optimizer only sees router weights. A
    checksum asserts bit-identity after (by default) every step.
    """
    params = collect_router_params(routers, expert_routers)
    if not params:
        raise ConfigError("no router parameters to train (attach routers first)")
    model.set_trainable(False)
    digest_before = _backbone_digest(model)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[LossBreakdown] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step, (inp, tgt) in enumerate(
            batch_iter(data, cfg.batch_size, cfg.steps, cfg.seed)
        ):
            opt.zero_grad()
            with Tape() as tape:
                logits, masks = train_forward(
                    model, inp, plan, routers, expert_routers
                )
                B, L, V = logits.shape
                task = T.cross_entropy(
                    T.reshape(logits, (B * L, V)), tgt.reshape(-1), ignore_index=PAD
                )
                hinge, capacity = mod_loss(masks, cfg.target_capacity)
                total = T.add(task, T.scale(hinge, cfg.lam))
                tape.backward(total)
            opt.step()
            entry = LossBreakdown(
                step,
                total.item(),
                task.item(),
                hinge.item(),
                capacity,
                [
                    {"layer": tm.layer, "target": tm.target, "capacity": tm.capacity}
                    for tm in masks
                ],
            )
            history.append(entry)
            if log_fh:
                log_fh.write(entry.to_json() + "\n")
            if cfg.backbone_check_every and step % cfg.backbone_check_every == 0:
                assert _backbone_digest(model) == digest_before, (
                    "backbone parameters changed during router training"
                )
    finally:
        if log_fh:
            log_fh.close()
    assert _backbone_digest(model) == digest_before, (
        "backbone parameters changed during router training"
    )
    return history


def pretrain_backbone(
    model: Model,
    data: Dataset,
    steps: int,
    learning_rate: float = 1e-3,
    batch_size: int = 8,
    seq_len: int | None = None,
    seed: int = 0,
    log_path=None,
) -> list[float]:
    """Brief dense next-token pretraining so the frozen backbone has structure
    worth routing around. Trains every parameter; freezes the model on exit."""
    model.set_trainable(True)
    params = [model.params[name] for name in sorted(model.params)]
    opt = Adam(params, learning_rate)
    losses: list[float] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step, (inp, tgt) in enumerate(batch_iter(data, batch_size, steps, seed)):
            opt.zero_grad()
            with Tape() as tape:
                logits, _ = train_forward(model, inp)
                B, L, V = logits.shape
                loss = T.cross_entropy(
                    T.reshape(logits, (B * L, V)), tgt.reshape(-1), ignore_index=PAD
                )
                tape.backward(loss)
            opt.step()
            losses.append(loss.item())
            if log_fh:
                log_fh.write(json.dumps({"step": step, "task_loss": losses[-1]}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    model.set_trainable(False)
    return losses


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


@dataclass
class GridCell:
    learning_rate: float
    lam: float
    val_loss: float
    capacity: float


@dataclass
class GridResult:
    cells: list[GridCell]
    best: GridCell
    warning: bool  # no cell met the capacity constraint; closest one returned

    def to_dict(self) -> dict:
        return {
            "cells": [vars(c) for c in self.cells],
            "best": vars(self.best),
            "warning": self.warning,
        }


def grid_search(
    model: Model,
    plan: RoutePlan,
    train_data: Dataset,
    val_data: Dataset,
    cfg: TrainConfig,
    capacity_tolerance: float = 0.05,
) -> tuple[GridResult, dict[int, RouterState]]:
    """Train one router set per (lr, lambda) cell from zero init with the same
    seed; select the best validation task loss among cells whose measured
    capacity lands within the tolerance of the target. Ties prefer the lower
    lambda, then the lower learning rate.

    Returns the result table and the winning cell's trained routers.
    """
    from .bench import evaluate_ppl
    from .routing import init_routers

    if not cfg.lr_grid or not cfg.lambda_grid:
        raise ConfigError("grid search needs non-empty lr and lambda grids")
    cells: list[GridCell] = []
    trained: dict[tuple[float, float], dict[int, RouterState]] = {}
    for lam in cfg.lambda_grid:
        for lr in cfg.lr_grid:
            routers = init_routers(model, plan)
            run_cfg = replace(cfg, learning_rate=lr, lam=lam)
            train_routers(model, train_data, run_cfg, plan, routers)
            report = evaluate_ppl(model, val_data, plan, routers,
                                  batch_size=cfg.batch_size)
            cells.append(GridCell(lr, lam, report.mean_ce, report.capacity))
            trained[(lr, lam)] = routers
    qualifying = [c for c in cells if abs(c.capacity - cfg.target_capacity) <= capacity_tolerance]
    if qualifying:
        best = min(qualifying, key=lambda c: (c.val_loss, c.lam, c.learning_rate))
        warning = False
    else:
        best = min(
            cells,
            key=lambda c: (abs(c.capacity - cfg.target_capacity), c.lam, c.learning_rate),
        )
        warning = True
    return GridResult(cells, best, warning), trained[(best.learning_rate, best.lam)]
