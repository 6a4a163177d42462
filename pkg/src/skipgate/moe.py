"""Top-k mixture-of-experts layers with optional per-expert skip routers.

Each expert owns a d->1 skip gate; a token assigned to an expert by the top-k
selection is *executed* only if its skip score clears the threshold, otherwise
that expert contributes zero for the token (the token is not rerouted).
Assigned-vs-executed counts are collected per (layer, expert) for load
reporting.

The static Expert-Drop baseline is realized as a per-layer survivor list: the
gate is restricted to surviving experts (softmax renormalizes over them) and
no parameters are rewritten.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import Model, rms_np, sigmoid_np, softmax_np
from .tensor import Tensor, flop_scope, mm


class ExpertSkipRouters:
    """Zero-initialized skip gates, one per (moe layer, expert)."""

    def __init__(self, model: Model, tau: float = 0.5, layers: list[int] | None = None):
        if model.cfg.moe is None:
            raise ConfigError("expert skip routers need a mixture-of-experts model")
        self.tau = tau
        d = model.cfg.d_model
        n = model.cfg.moe.n_experts
        which = list(range(model.cfg.n_layers)) if layers is None else list(layers)
        self.layers: dict[int, list[Tensor]] = {
            li: [Tensor(np.zeros((d, 1), dtype=np.float32), requires_grad=True) for _ in range(n)]
            for li in which
        }

    def params(self) -> list[Tensor]:
        return [w for ws in self.layers.values() for w in ws]

    def n_params(self) -> int:
        return sum(w.data.size for w in self.params())


class ExpertLoadReport:
    """Accumulates assigned and executed token counts per (layer, expert)."""

    def __init__(self):
        self.assigned: dict[int, np.ndarray] = {}
        self.executed: dict[int, np.ndarray] = {}

    def add(self, layer: int, assigned: np.ndarray, executed: np.ndarray) -> None:
        if layer not in self.assigned:
            self.assigned[layer] = np.zeros_like(assigned)
            self.executed[layer] = np.zeros_like(executed)
        self.assigned[layer] += assigned
        self.executed[layer] += executed

    def normalized(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Loads divided by the mean assigned count of that layer."""
        mean = self.assigned[layer].mean()
        if mean == 0:
            mean = 1.0
        return self.assigned[layer] / mean, self.executed[layer] / mean

    def rows(self) -> list[dict]:
        out = []
        for layer in sorted(self.assigned):
            for e in range(self.assigned[layer].shape[0]):
                out.append(
                    {
                        "layer": layer,
                        "expert": e,
                        "assigned": int(self.assigned[layer][e]),
                        "executed": int(self.executed[layer][e]),
                    }
                )
        return out

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.rows():
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class ExpertDropPlan:
    """Surviving original expert indices per layer after static dropping."""

    survivors: dict[int, np.ndarray]
    importance: dict[int, np.ndarray] = field(default_factory=dict)
    n_dropped: int = 0

    def at(self, layer: int) -> np.ndarray | None:
        return self.survivors.get(layer)


def _topk_select(probs: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on the negated scores: ties resolve to the lower expert index.
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def _expert_infer(model: Model, li: int, e: int, xn: np.ndarray) -> np.ndarray:
    g = mm(xn, model.p(f"layers.{li}.moe.expert{e}.w_gate").data)
    u = mm(xn, model.p(f"layers.{li}.moe.expert{e}.w_in").data)
    return mm((g * sigmoid_np(g)) * u, model.p(f"layers.{li}.moe.expert{e}.w_out").data)


def _expert_train(model: Model, li: int, e: int, xn: Tensor) -> Tensor:
    g = T.matmul(xn, model.p(f"layers.{li}.moe.expert{e}.w_gate"))
    u = T.matmul(xn, model.p(f"layers.{li}.moe.expert{e}.w_in"))
    return T.matmul(T.mul(T.silu(g), u), model.p(f"layers.{li}.moe.expert{e}.w_out"))


def moe_combine_infer(
    model: Model,
    li: int,
    xn: np.ndarray,
    expert_routers: ExpertSkipRouters | None = None,
    report: ExpertLoadReport | None = None,
    forced: dict[int, bool] | None = None,
    survivors: np.ndarray | None = None,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Top-k combine over (already normalized) rows [N, d]: select k experts
    by gate softmax, weight each executed expert's output by its raw gate
    score (renormalization over the selected set is optional, off by
    default)."""
    cfg = model.cfg
    moe = cfg.moe
    n = moe.n_experts
    gate = model.p(f"layers.{li}.moe.gate").data
    layer_routers = expert_routers.layers.get(li) if expert_routers is not None else None

    with flop_scope(f"L{li}.moe_gate"):
        if survivors is None:
            logits = mm(xn, gate)
        else:
            logits = mm(xn, np.ascontiguousarray(gate[:, survivors]))
    probs = softmax_np(logits, axis=-1)
    k_eff = min(moe.top_k, probs.shape[1])
    sel = _topk_select(probs, k_eff)  # columns index into survivors when restricted
    N = xn.shape[0]
    denom = None
    if moe.renormalize:
        denom = probs[np.arange(N)[:, None], sel].sum(axis=-1)

    y = np.zeros((N, cfg.d_model), dtype=np.float32)
    assigned = np.zeros(n, dtype=np.int64)
    executed = np.zeros(n, dtype=np.int64)
    for col in range(probs.shape[1]):
        e = int(survivors[col]) if survivors is not None else col
        rows_e = np.nonzero((sel == col).any(axis=1))[0]
        assigned[e] = rows_e.size
        if rows_e.size == 0:
            continue
        if layer_routers is not None:
            with flop_scope(f"L{li}.moe_router"):
                s = sigmoid_np(mm(xn[rows_e], layer_routers[e].data))[:, 0]
            if forced is not None and e in forced:
                keep = np.full(rows_e.size, bool(forced[e]))
            else:
                keep = s >= np.float32(expert_routers.tau)
            exec_rows = rows_e[keep]
        else:
            exec_rows = rows_e
        executed[e] = exec_rows.size
        if exec_rows.size == 0:
            continue
        w = probs[exec_rows, col]
        if denom is not None:
            w = w / denom[exec_rows]
        with flop_scope(f"L{li}.moe_expert"):
            out = _expert_infer(model, li, e, xn[exec_rows])
        y[exec_rows] += out * w[:, None]
    if report is not None:
        report.add(li, assigned, executed)
    return y, (assigned, executed)


def moe_rows_infer(
    model: Model,
    li: int,
    rows: np.ndarray,
    expert_routers: ExpertSkipRouters | None = None,
    report: ExpertLoadReport | None = None,
    forced: dict[int, bool] | None = None,
    survivors: np.ndarray | None = None,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Normalize rows, then combine; returns the sublayer delta."""
    xn = rms_np(rows, model.p(f"layers.{li}.mlp_norm").data, model.cfg.norm_eps)
    return moe_combine_infer(model, li, xn, expert_routers, report, forced, survivors)


def moe_layer_dense(model: Model, li: int, x: np.ndarray) -> np.ndarray:
    """Bare top-k combine on raw rows [N, d] (no normalization, no residual)."""
    y, _ = moe_combine_infer(model, li, np.ascontiguousarray(x, dtype=np.float32))
    return y


def moe_delta_train(
    model: Model,
    li: int,
    rows: Tensor,
    expert_routers: ExpertSkipRouters | None = None,
    surrogate: bool = False,
    forced: dict[int, bool] | None = None,
):
    """Tape version of the combine (norm included); selected-but-skipped
    experts are evaluated and masked by the straight-through gate so their
    skip weights receive gradients. Returns (delta, mask record, load counts).
    """
    from .routing import TrainMask

    cfg = model.cfg
    moe = cfg.moe
    n = moe.n_experts
    layer_routers = expert_routers.layers.get(li) if expert_routers is not None else None
    xn = T.rmsnorm(rows, model.p(f"layers.{li}.mlp_norm"), cfg.norm_eps)
    with flop_scope(f"L{li}.moe_gate"):
        logits = T.matmul(xn, model.p(f"layers.{li}.moe.gate"))
    probs = T.softmax(logits, axis=-1)
    sel = _topk_select(probs.data, moe.top_k)
    N = rows.shape[0]
    denom = None
    if moe.renormalize:
        rep = np.repeat(np.arange(N), moe.top_k)
        psel = T.reshape(T.pick(probs, rep, sel.reshape(-1)), (N, moe.top_k))
        denom = T.tsum(psel, axis=1)  # [N]

    y: Tensor | None = None
    assigned = np.zeros(n, dtype=np.int64)
    executed = np.zeros(n, dtype=np.int64)
    mask_tensors: list[Tensor] = []
    n_kept = 0
    for e in range(n):
        rows_e = np.nonzero((sel == e).any(axis=1))[0]
        assigned[e] = rows_e.size
        if rows_e.size == 0:
            continue
        xe = T.take_rows(xn, rows_e)
        with flop_scope(f"L{li}.moe_expert"):
            out = _expert_train(model, li, e, xe)
        if layer_routers is not None:
            with flop_scope(f"L{li}.moe_router"):
                s = T.sigmoid(T.matmul(xe, layer_routers[e]))  # [m, 1]
            hard = s.data[:, 0] >= np.float32(expert_routers.tau)
            if forced is not None and e in forced:
                hard = np.full(rows_e.size, bool(forced[e]))
                m = Tensor(hard.astype(np.float32).reshape(-1, 1))
            elif surrogate:
                m = s
            else:
                m = T.ste_threshold(s, expert_routers.tau)
            executed[e] = int(hard.sum())
            n_kept += int(hard.sum())
            mask_tensors.append(m)
            out = T.mul(out, m)
        else:
            executed[e] = rows_e.size
        w = T.pick(probs, rows_e, np.full(rows_e.size, e))
        if denom is not None:
            w = T.div(w, T.take_rows(denom, rows_e))
        contrib = T.mul(out, T.reshape(w, (rows_e.size, 1)))
        scattered = T.put_rows(contrib, rows_e, N)
        y = scattered if y is None else T.add(y, scattered)

    tm = None
    if layer_routers is not None:
        tm = TrainMask(
            li, "moe_experts", "token", mask_tensors,
            int(assigned.sum()), n_kept, None, None,
        )
    return y, tm, (assigned, executed)


def moe_forward_skip(
    model: Model,
    li: int,
    x,
    expert_routers: ExpertSkipRouters,
    mode: str = "infer",
    forced: dict[int, bool] | None = None,
):
    """Skip-enabled expert layer on rows [N, d] (normalization included).

    Inference bypasses skipped experts entirely; training evaluates every
    selected expert and masks it so the skip gates stay trainable. Returns
    the sublayer delta plus the assigned/executed load report.
    """
    report = ExpertLoadReport()
    if mode == "infer":
        rows = np.ascontiguousarray(x, dtype=np.float32)
        delta, _ = moe_rows_infer(model, li, rows, expert_routers, report=report,
                                  forced=forced)
        return delta, report
    if mode == "train":
        rows = x if isinstance(x, Tensor) else Tensor(x)
        delta, _tm, (assigned, executed) = moe_delta_train(
            model, li, rows, expert_routers, forced=forced
        )
        report.add(li, assigned, executed)
        return delta, report
    raise ConfigError(f"mode must be 'infer' or 'train', got {mode!r}")


# ---------------------------------------------------------------------------
# Static Expert-Drop baseline
# ---------------------------------------------------------------------------


def calibrate_gate_mass(model: Model, tokens: np.ndarray) -> dict[int, np.ndarray]:
    """Expert importance: mean softmax gate probability over calibration rows.

    Runs the dense forward, collecting each moe layer's gate distribution.
    """
    from .model import attn_delta_infer

    if model.cfg.moe is None:
        raise ConfigError("gate-mass calibration needs a mixture-of-experts model")
    collector: dict[int, np.ndarray] = {}
    tokens = np.asarray(tokens, dtype=np.int64)
    B, L = tokens.shape
    x = model.p("tok_emb").data[tokens].copy()
    pos = np.arange(L)

    for li in range(model.cfg.n_layers):
        x += attn_delta_infer(model, li, x, pos)
        rows = x.reshape(B * L, model.cfg.d_model)
        xn = rms_np(rows, model.p(f"layers.{li}.mlp_norm").data, model.cfg.norm_eps)
        probs = softmax_np(mm(xn, model.p(f"layers.{li}.moe.gate").data), axis=-1)
        collector[li] = probs.mean(axis=0)
        delta, _ = moe_combine_infer(model, li, xn)
        rows += delta
    return collector


def expert_drop_baseline(
    model: Model, importance: dict[int, np.ndarray], drop_fraction: float
) -> ExpertDropPlan:
    """Drop the globally lowest-importance floor(drop_fraction * total) experts.

    Ties break toward the lower (layer, expert) index; a layer may not lose
    all of its experts. The gate renormalizes over survivors at inference.
    """
    if not 0 <= drop_fraction < 1:
        raise ConfigError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    n = model.cfg.moe.n_experts
    layers = sorted(importance)
    total = len(layers) * n
    n_drop = int(np.floor(drop_fraction * total))
    ranked = sorted(
        ((float(importance[li][e]), li, e) for li in layers for e in range(n)),
    )
    dropped = {(li, e) for _, li, e in ranked[:n_drop]}
    survivors: dict[int, np.ndarray] = {}
    for li in layers:
        keep = np.array([e for e in range(n) if (li, e) not in dropped], dtype=np.int64)
        if keep.size == 0:
            raise ConfigError(f"expert drop would remove every expert of layer {li}")
        survivors[li] = keep
    return ExpertDropPlan(survivors, {li: importance[li].copy() for li in layers}, n_drop)
