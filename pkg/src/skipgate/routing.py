"""Per-layer skip routers: importance scoring, threshold binarization, the
straight-through masked training forward, and the true-bypass inference
forward for attention / MLP / block targets at token or sequence granularity.

Semantics pinned by the test suite:

* Zero-initialized gate weights score exactly sigmoid(0)=0.5 >= tau, so every
  decision starts "keep" and the routed model reproduces the dense model
  bitwise on both forward paths.
* Training multiplies the binarized mask into the sublayer delta (the unit is
  evaluated for every input); inference bypasses the unit entirely.
* Token-level attention bypass removes the skipped token from the layer's
  queries *and* keys/values, so no KV-cache entry is written for it. Block
  targets keep skipped tokens visible as keys/values (only the token's own
  query, attention output and MLP are bypassed), which makes the masked
  training forward and the bypass forward agree exactly for blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, PlanError, StateError
from .model import (
    KVCache,
    Model,
    attn_delta_infer,
    attn_delta_train,
    embed_tokens,
    lm_head_infer,
    lm_head_train,
    mlp_delta_infer,
    mlp_delta_train,
    sigmoid_np,
)
from .tensor import Tensor, flop_scope, mm

TARGETS = ("attention", "mlp", "block")
GRANULARITIES = ("token", "sequence")


@dataclass(frozen=True)
class RouterSpec:
    layer: int
    target: str
    granularity: str


@dataclass
class RoutePlan:
    """Which layers carry routers, plus the shared threshold."""

    routers: list[RouterSpec]
    tau: float = 0.5
    causal_prefix_fraction: float | None = None

    def at(self, layer: int) -> RouterSpec | None:
        for spec in self.routers:
            if spec.layer == layer:
                return spec
        return None

    def layers(self) -> list[int]:
        return [spec.layer for spec in self.routers]

    def validate(self, n_layers: int) -> None:
        seen = set()
        for spec in self.routers:
            if not 0 <= spec.layer < n_layers:
                raise PlanError(f"router layer {spec.layer} outside model with {n_layers} layers")
            if spec.layer in seen:
                raise PlanError(f"duplicate router on layer {spec.layer}")
            if spec.target not in TARGETS:
                raise PlanError(f"unknown target {spec.target!r}")
            if spec.granularity not in GRANULARITIES:
                raise PlanError(f"unknown granularity {spec.granularity!r}")
            seen.add(spec.layer)
        if self.causal_prefix_fraction is not None and not (0 < self.causal_prefix_fraction <= 1):
            raise PlanError("causal_prefix_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "routers": [
                {"layer": s.layer, "target": s.target, "granularity": s.granularity}
                for s in self.routers
            ],
            "tau": self.tau,
            "causal_prefix_fraction": self.causal_prefix_fraction,
        }

    @staticmethod
    def from_dict(d: dict) -> "RoutePlan":
        return RoutePlan(
            routers=[
                RouterSpec(r["layer"], r["target"], r["granularity"]) for r in d["routers"]
            ],
            tau=d.get("tau", 0.5),
            causal_prefix_fraction=d.get("causal_prefix_fraction"),
        )


def default_plan(
    n_layers: int,
    target: str = "attention",
    granularity: str = "sequence",
    count: int | None = None,
    tau: float = 0.5,
) -> RoutePlan:
    """Routers on the deepest layers, excluding the final one.

    Without an explicit count this is the deepest half of the stack minus the
    last layer; with a count, the `count` layers just below the last.
    """
    if count is None:
        start = n_layers // 2
    else:
        start = n_layers - 1 - count
        if start < 0:
            raise PlanError(f"cannot place {count} routers in {n_layers} layers (last is exempt)")
    specs = [RouterSpec(li, target, granularity) for li in range(start, n_layers - 1)]
    return RoutePlan(specs, tau=tau)


class RouterState:
    """One gate: a d->1 projection, threshold, and placement metadata.

    The projection weight is the router's only trainable tensor (d_model
    parameters per layer); it starts at zero so the routed model begins dense.
    """

    def __init__(self, d_model: int, layer_index: int, target: str, granularity: str,
                 tau: float = 0.5):
        self.W = Tensor(np.zeros((d_model, 1), dtype=np.float32), requires_grad=True)
        self.tau = tau
        self.granularity = granularity
        self.target = target
        self.layer_index = layer_index

    def n_params(self) -> int:
        return self.W.data.size


def init_routers(model: Model, plan: RoutePlan) -> dict[int, RouterState]:
    plan.validate(model.cfg.n_layers)
    return {
        spec.layer: RouterState(
            model.cfg.d_model, spec.layer, spec.target, spec.granularity, plan.tau
        )
        for spec in plan.routers
    }


# ---------------------------------------------------------------------------
# Scoring and binarization
# ---------------------------------------------------------------------------


def _prefix_len(length: int, fraction: float | None) -> int:
    if fraction is None:
        return length
    return max(1, int(np.ceil(fraction * length)))


def route_score_np(
    router: RouterState, x: np.ndarray, prefix_fraction: float | None = None
) -> np.ndarray:
    """Importance scores for [L, d] or [B, L, d] input: per token, or one
    pooled score per sequence."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    with flop_scope(f"L{router.layer_index}.router"):
        if router.granularity == "token":
            s = sigmoid_np(mm(x, router.W.data))[..., 0]  # [B, L]
        else:
            n = _prefix_len(x.shape[1], prefix_fraction)
            pooled = x[:, :n].mean(axis=1)  # [B, d]
            s = sigmoid_np(mm(pooled, router.W.data))[..., 0]  # [B]
    return s[0] if squeeze else s


def route_score_train(
    router: RouterState, x: Tensor, prefix_fraction: float | None = None
) -> Tensor:
    """Tape version; returns [B, L, 1] (token) or [B, 1] (sequence) scores."""
    with flop_scope(f"L{router.layer_index}.router"):
        if router.granularity == "token":
            return T.sigmoid(T.matmul(x, router.W))
        n = _prefix_len(x.shape[1], prefix_fraction)
        pooled = T.mean(x if n == x.shape[1] else T.narrow(x, 1, 0, n), axis=1)
        return T.sigmoid(T.matmul(pooled, router.W))


def route_score(router: RouterState, x, prefix_fraction: float | None = None):
    """Dispatching surface: numpy in, numpy out; Tensor in, Tensor out."""
    if isinstance(x, Tensor):
        return route_score_train(router, x, prefix_fraction)
    return route_score_np(router, np.asarray(x, dtype=np.float32), prefix_fraction)


def binarize(scores: np.ndarray, tau: float) -> np.ndarray:
    """Keep/skip mask; a score exactly at the threshold keeps the unit."""
    return np.asarray(scores) >= np.float32(tau)


# ---------------------------------------------------------------------------
# Decision records
# ---------------------------------------------------------------------------


@dataclass
class LayerDecisions:
    layer: int
    target: str
    granularity: str
    kept: np.ndarray  # bool, [B] (sequence) or [B, L] (token)
    scores: np.ndarray | None = None

    @property
    def n_decisions(self) -> int:
        return int(self.kept.size)

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())


@dataclass
class SkipMask:
    batch: int
    seq_len: int
    layers: list[LayerDecisions] = field(default_factory=list)

    def capacity(self) -> float:
        total = sum(d.n_decisions for d in self.layers)
        return float(sum(d.n_kept for d in self.layers)) / total if total else 1.0

    def per_layer_capacity(self) -> dict[int, float]:
        return {d.layer: d.n_kept / d.n_decisions for d in self.layers}

    def at(self, layer: int) -> LayerDecisions | None:
        for d in self.layers:
            if d.layer == layer:
                return d
        return None


@dataclass
class TraceRecord:
    seq: int
    layer: int
    pos: int | None  # None for sequence-level decisions
    score: float | None
    kept: bool


class SkipTrace:
    """Flat record of every routing decision taken during evaluation."""

    def __init__(self):
        self.records: list[TraceRecord] = []

    def add(self, seq: int, layer: int, pos: int | None, score: float | None, kept: bool):
        self.records.append(TraceRecord(seq, layer, pos, score, kept))

    def extend_layer(self, decisions: LayerDecisions, seq_offset: int = 0) -> None:
        kept = decisions.kept
        scores = decisions.scores
        if decisions.granularity == "sequence":
            for b in range(kept.shape[0]):
                s = float(scores[b]) if scores is not None else None
                self.add(seq_offset + b, decisions.layer, None, s, bool(kept[b]))
        else:
            for b in range(kept.shape[0]):
                for t in range(kept.shape[1]):
                    s = float(scores[b, t]) if scores is not None else None
                    self.add(seq_offset + b, decisions.layer, t, s, bool(kept[b, t]))

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# Single-unit ops (used directly by tests; the model engine inlines the same
# logic per layer)
# ---------------------------------------------------------------------------


def mod_forward_train(
    router: RouterState,
    f,
    x: Tensor,
    surrogate: bool = False,
    forced: np.ndarray | None = None,
    prefix_fraction: float | None = None,
) -> tuple[Tensor, Tensor]:
    """Masked training forward y = M * f(x) + x for one unit on [B, L, d] input.

    `f` maps the input tensor to the sublayer delta. Requires an active
    gradient tape; the unit is evaluated for every input and the mask only
    multiplies its output. Returns (y, mask_tensor).
    """
    if T.active_tape() is None:
        raise StateError("mod_forward_train requires an active gradient tape (training mode)")
    scores = route_score_train(router, x, prefix_fraction)
    if forced is not None:
        m = Tensor(np.asarray(forced, dtype=np.float32).reshape(scores.shape))
    elif surrogate:
        m = scores
    else:
        m = T.ste_threshold(scores, router.tau)
    bshape = (x.shape[0], 1, 1) if router.granularity == "sequence" else m.shape
    mb = T.reshape(m, bshape)
    return T.add(T.mul(mb, f(x)), x), m


def mod_forward_infer(
    router: RouterState,
    f,
    x: np.ndarray,
    forced: np.ndarray | None = None,
    prefix_fraction: float | None = None,
) -> tuple[np.ndarray, LayerDecisions]:
    """Bypass inference for one unit on a single sequence [L, d]: kept inputs
    get f(rows) + rows, skipped inputs pass through untouched and `f` never
    sees them."""
    scores = route_score_np(router, x, prefix_fraction)
    kept = binarize(scores, router.tau) if forced is None else np.asarray(forced, dtype=bool)
    if router.granularity == "sequence":
        y = x + f(x) if kept else x.copy()
        dec = LayerDecisions(
            router.layer_index, router.target, "sequence",
            np.asarray(kept).reshape(1), np.asarray(scores).reshape(1),
        )
    else:
        y = x.copy()
        idx = np.nonzero(kept)[0]
        if idx.size:
            y[idx] = x[idx] + f(x[idx])
        dec = LayerDecisions(
            router.layer_index, router.target, "token", kept[None, :], scores[None, :]
        )
    return y, dec


# ---------------------------------------------------------------------------
# Full-model masked training forward
# ---------------------------------------------------------------------------


@dataclass
class TrainMask:
    layer: int
    target: str
    granularity: str
    mask_tensors: list  # tensors whose elementwise sums count kept decisions
    n_decisions: int
    n_kept: int
    scores: np.ndarray | None = None
    kept: np.ndarray | None = None

    @property
    def capacity(self) -> float:
        return self.n_kept / self.n_decisions


def _train_mask(
    router: RouterState,
    x: Tensor,
    tau: float,
    surrogate: bool,
    forced: np.ndarray | None,
    prefix_fraction: float | None,
) -> tuple[Tensor, TrainMask]:
    scores = route_score_train(router, x, prefix_fraction)
    hard = binarize(scores.data, tau)
    if forced is not None:
        hard = np.asarray(forced, dtype=bool).reshape(hard.shape)
        m = Tensor(hard.astype(np.float32))
    elif surrogate:
        m = scores
    else:
        m = T.ste_threshold(scores, tau)
    if router.granularity == "sequence":
        mb = T.reshape(m, (x.shape[0], 1, 1))
        kept = hard.reshape(-1)
        scores_np = scores.data.reshape(-1)
    else:
        mb = m  # already [B, L, 1]
        kept = hard[..., 0]
        scores_np = scores.data[..., 0]
    tm = TrainMask(
        router.layer_index, router.target, router.granularity,
        [m], int(hard.size), int(hard.sum()), scores_np, kept,
    )
    return mb, tm


def train_forward(
    model: Model,
    tokens: np.ndarray,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers=None,
    surrogate: bool = False,
    forced: dict[int, np.ndarray] | None = None,
) -> tuple[Tensor, list[TrainMask]]:
    """Masked training forward over a [B, L] token batch.

    Every sublayer is evaluated for every input; routed layers multiply the
    straight-through mask into their delta (block targets apply their single
    mask to both sublayer deltas). Returns final logits and the per-layer
    masks in layer order.
    """
    from . import moe as moe_mod

    tokens = np.asarray(tokens, dtype=np.int64)
    B, L = tokens.shape
    cfg = model.cfg
    if L > cfg.max_seq_len:
        raise CapacityError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    forced = forced or {}
    pf = plan.causal_prefix_fraction if plan else None
    pos = np.arange(L)
    x = T.embedding_lookup(model.p("tok_emb"), tokens)
    masks: list[TrainMask] = []

    def mlp_slot_delta(rows: Tensor, li: int) -> Tensor:
        if cfg.moe is None:
            return mlp_delta_train(model, li, rows)
        delta, tm, _counts = moe_mod.moe_delta_train(
            model, li, rows, expert_routers, surrogate=surrogate
        )
        if tm is not None:
            masks.append(tm)
        return delta

    for li in range(cfg.n_layers):
        spec = plan.at(li) if plan else None
        router = routers.get(li) if routers else None
        if spec is not None and router is None:
            raise PlanError(f"plan routes layer {li} but no router state was provided")

        block_mask: Tensor | None = None
        if spec is not None and spec.target in ("attention", "block"):
            mb, tm = _train_mask(router, x, plan.tau, surrogate, forced.get(li), pf)
            masks.append(tm)
            ad = attn_delta_train(model, li, x, pos)
            x = T.add(T.mul(mb, ad), x)
            if spec.target == "block":
                block_mask = mb
        else:
            ad = attn_delta_train(model, li, x, pos)
            x = T.add(ad, x)

        mlp_mask: Tensor | None = block_mask
        if spec is not None and spec.target == "mlp":
            mlp_mask, tm = _train_mask(router, x, plan.tau, surrogate, forced.get(li), pf)
            masks.append(tm)

        rows = T.reshape(x, (B * L, cfg.d_model))
        md = T.reshape(mlp_slot_delta(rows, li), (B, L, cfg.d_model))
        if mlp_mask is not None:
            x = T.add(T.mul(mlp_mask, md), x)
        else:
            x = T.add(md, x)

    return lm_head_train(model, x), masks


# ---------------------------------------------------------------------------
# Batched inference forward (no cache): evaluation path
# ---------------------------------------------------------------------------


def _decide_np(
    router: RouterState,
    x: np.ndarray,
    tau: float,
    forced: np.ndarray | None,
    quota_capacity: float | None,
    prefix_fraction: float | None,
    score_forced: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Decisions come from the threshold unless forced or capacity-matched per
    layer. Scores are computed even for forced decisions (they feed the
    trace), except when `score_forced` is off (static drop plans)."""
    if forced is not None and not score_forced:
        shape = (x.shape[0],) if router.granularity == "sequence" else x.shape[:2]
        return None, np.asarray(forced, dtype=bool).reshape(shape)
    scores = route_score_np(router, x, prefix_fraction)
    if forced is not None:
        kept = np.asarray(forced, dtype=bool).reshape(scores.shape)
    elif quota_capacity is not None and router.granularity == "sequence":
        n_keep = int(round(quota_capacity * scores.shape[0]))
        order = np.argsort(-scores, kind="stable")
        kept = np.zeros(scores.shape, dtype=bool)
        kept[order[:n_keep]] = True
    else:
        kept = binarize(scores, tau)
    return scores, kept


def infer_eval(
    model: Model,
    tokens: np.ndarray,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers=None,
    forced: dict[int, np.ndarray] | None = None,
    quota_capacity: float | None = None,
    trace: SkipTrace | None = None,
    seq_offset: int = 0,
    moe_load=None,
    expert_drop=None,
    score_forced: bool = True,
) -> tuple[np.ndarray, SkipMask]:
    """Bypass inference over a [B, L] batch; returns logits and the decisions.

    Skipped units are never evaluated: sequence-level skips drop the whole
    sublayer for that sequence, token-level attention skips remove the token
    from the layer's queries and keys/values entirely.
    """
    from . import moe as moe_mod

    tokens = np.asarray(tokens, dtype=np.int64)
    B, L = tokens.shape
    cfg = model.cfg
    if L > cfg.max_seq_len:
        raise CapacityError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    forced = forced or {}
    pf = plan.causal_prefix_fraction if plan else None
    pos = np.arange(L)
    d = cfg.d_model
    x = embed_tokens(model, tokens)
    mask = SkipMask(B, L)

    def record(dec: LayerDecisions) -> None:
        mask.layers.append(dec)
        if trace is not None:
            trace.extend_layer(dec, seq_offset)

    def run_mlp_rows(li: int, row_idx: np.ndarray | None) -> None:
        flat = x.reshape(B * L, d)
        rows = flat if row_idx is None else flat[row_idx]
        if rows.shape[0] == 0:
            return
        if cfg.moe is None:
            delta = mlp_delta_infer(model, li, rows)
        else:
            delta, _ = moe_mod.moe_rows_infer(
                model, li, rows, expert_routers, report=moe_load,
                survivors=expert_drop.at(li) if expert_drop is not None else None,
            )
        if row_idx is None:
            flat += delta
        else:
            flat[row_idx] += delta

    for li in range(cfg.n_layers):
        spec = plan.at(li) if plan else None
        router = routers.get(li) if routers else None
        if spec is not None and router is None:
            raise PlanError(f"plan routes layer {li} but no router state was provided")

        if spec is None:
            x += attn_delta_infer(model, li, x, pos)
            run_mlp_rows(li, None)
            continue

        if spec.target == "attention":
            scores, kept = _decide_np(router, x, plan.tau, forced.get(li), quota_capacity, pf,
                                      score_forced)
            record(LayerDecisions(li, spec.target, spec.granularity, kept, scores))
            if spec.granularity == "sequence":
                idx = np.nonzero(kept)[0]
                if idx.size:
                    x[idx] += attn_delta_infer(model, li, x[idx], pos)
            else:
                for b in range(B):
                    sp = np.nonzero(kept[b])[0]
                    if sp.size:
                        x[b, sp] += attn_delta_infer(model, li, x[b, sp], sp)
            run_mlp_rows(li, None)
        elif spec.target == "mlp":
            x += attn_delta_infer(model, li, x, pos)
            scores, kept = _decide_np(router, x, plan.tau, forced.get(li), quota_capacity, pf,
                                      score_forced)
            record(LayerDecisions(li, spec.target, spec.granularity, kept, scores))
            rows_mask = np.repeat(kept, L) if spec.granularity == "sequence" else kept.reshape(-1)
            run_mlp_rows(li, np.nonzero(rows_mask)[0])
        else:  # block
            scores, kept = _decide_np(router, x, plan.tau, forced.get(li), quota_capacity, pf,
                                      score_forced)
            record(LayerDecisions(li, spec.target, spec.granularity, kept, scores))
            if spec.granularity == "sequence":
                idx = np.nonzero(kept)[0]
                if idx.size:
                    x[idx] += attn_delta_infer(model, li, x[idx], pos)
                rows_mask = np.repeat(kept, L)
                run_mlp_rows(li, np.nonzero(rows_mask)[0])
            else:
                for b in range(B):
                    sp = np.nonzero(kept[b])[0]
                    if sp.size:
                        x[b, sp] += attn_delta_infer(
                            model, li, x[b, sp], sp, kv_pos=pos, x_kv=x[b]
                        )
                run_mlp_rows(li, np.nonzero(kept.reshape(-1))[0])

    return lm_head_infer(model, x), mask


# ---------------------------------------------------------------------------
# Incremental (cached) forward: generation path
# ---------------------------------------------------------------------------


class SequenceSession:
    """Incremental forward over one sequence with a KV cache.

    Sequence-level routing decisions are computed once when the layer first
    sees the sequence (the prefill pooled mean) and stay frozen for every
    generated token; token-level decisions are taken per position as it
    streams in.
    """

    def __init__(
        self,
        model: Model,
        plan: RoutePlan | None = None,
        routers: dict[int, RouterState] | None = None,
        expert_routers=None,
        cache: KVCache | None = None,
        capacity: int | None = None,
        forced: dict[int, object] | None = None,
        trace: SkipTrace | None = None,
        seq_id: int = 0,
        moe_load=None,
        expert_drop=None,
    ):
        self.model = model
        self.plan = plan
        self.routers = routers or {}
        self.expert_routers = expert_routers
        self.cache = cache if cache is not None else KVCache(model.cfg, capacity)
        self.forced = forced or {}
        self.trace = trace
        self.seq_id = seq_id
        self.moe_load = moe_load
        self.expert_drop = expert_drop
        self.frozen: dict[int, bool] = {}
        self.pos = 0
        self._specs = [
            plan.at(li) if plan else None for li in range(model.cfg.n_layers)
        ]

    def _seq_decision(self, li: int, router: RouterState, x: np.ndarray) -> bool:
        if li in self.frozen:
            return self.frozen[li]
        pf = self.plan.causal_prefix_fraction if self.plan else None
        score = float(route_score_np(router, x, pf))
        kept = bool(self.forced[li]) if li in self.forced else bool(score >= self.plan.tau)
        self.frozen[li] = kept
        if self.trace is not None:
            self.trace.add(self.seq_id, li, None, score, kept)
        return kept

    def _token_decision(self, li: int, router: RouterState, x: np.ndarray,
                        positions: np.ndarray) -> np.ndarray:
        scores = route_score_np(router, x, None)
        if li in self.forced:
            kept = np.asarray(self.forced[li], dtype=bool)[positions]
        else:
            kept = binarize(scores, self.plan.tau)
        if self.trace is not None:
            for p, s, k in zip(positions, scores, kept):
                self.trace.add(self.seq_id, li, int(p), float(s), bool(k))
        return kept

    def forward(self, tokens) -> np.ndarray:
        """Process len(tokens) new positions; returns their [n, vocab] logits."""
        model, cfg = self.model, self.model.cfg
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        n = tokens.shape[0]
        limit = min(self.cache.capacity, cfg.max_seq_len)
        if self.pos + n > limit:
            raise CapacityError(f"sequence of {self.pos + n} positions exceeds capacity {limit}")
        positions = np.arange(self.pos, self.pos + n)
        x = embed_tokens(model, tokens)

        def mlp_rows(li: int, idx: np.ndarray | None) -> None:
            from . import moe as moe_mod

            rows = x if idx is None else x[idx]
            if rows.shape[0] == 0:
                return
            if cfg.moe is None:
                delta = mlp_delta_infer(model, li, rows)
            else:
                delta, _ = moe_mod.moe_rows_infer(
                    model, li, rows, self.expert_routers, report=self.moe_load,
                    survivors=(
                        self.expert_drop.at(li) if self.expert_drop is not None else None
                    ),
                )
            if idx is None:
                x[...] += delta
            else:
                x[idx] += delta

        def dense_attn(li: int) -> None:
            x[...] += attn_delta_infer(
                model, li, x, positions, cache=self.cache.layer(li), write_cache=True
            )

        for li in range(cfg.n_layers):
            spec = self._specs[li]
            router = self.routers.get(li) if self.routers else None
            if spec is not None and router is None:
                raise PlanError(f"plan routes layer {li} but no router state was provided")

            if spec is None:
                dense_attn(li)
                mlp_rows(li, None)
            elif spec.target == "attention":
                if spec.granularity == "sequence":
                    if self._seq_decision(li, router, x):
                        dense_attn(li)
                else:
                    kept = self._token_decision(li, router, x, positions)
                    sp = np.nonzero(kept)[0]
                    if sp.size:
                        x[sp] += attn_delta_infer(
                            model, li, x[sp], positions[sp],
                            cache=self.cache.layer(li), write_cache=True,
                        )
                mlp_rows(li, None)
            elif spec.target == "mlp":
                dense_attn(li)
                if spec.granularity == "sequence":
                    if self._seq_decision(li, router, x):
                        mlp_rows(li, None)
                else:
                    kept = self._token_decision(li, router, x, positions)
                    mlp_rows(li, np.nonzero(kept)[0])
            else:  # block
                if spec.granularity == "sequence":
                    if self._seq_decision(li, router, x):
                        dense_attn(li)
                        mlp_rows(li, None)
                else:
                    # Skipped tokens still contribute keys/values for the block.
                    kept = self._token_decision(li, router, x, positions)
                    sp = np.nonzero(kept)[0]
                    delta = attn_delta_infer(
                        model, li, x[sp], positions[sp], kv_pos=positions, x_kv=x,
                        cache=self.cache.layer(li), write_cache=True,
                    )
                    if sp.size:
                        x[sp] += delta
                    mlp_rows(li, sp)

        self.pos += n
        return lm_head_infer(model, x)


def infer_forward_cached(model: Model, tokens: np.ndarray, cache: KVCache | None) -> np.ndarray:
    """Dense forward for one sequence; with a cache, appends len(tokens)
    positions and resumes from what the cache already holds."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if cache is None:
        logits, _ = infer_eval(model, tokens[None, :])
        return logits[0]
    session = SequenceSession(model, cache=cache)
    session.pos = cache.layers[0].length if 0 in cache.layers else 0
    return session.forward(tokens)


def generate(
    model: Model,
    prompt: np.ndarray,
    gen_len: int,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers=None,
    forced: dict[int, object] | None = None,
    trace: SkipTrace | None = None,
    seq_id: int = 0,
    moe_load=None,
    expert_drop=None,
) -> tuple[list[int], KVCache]:
    """Greedy generation of gen_len tokens after the prompt; every generated
    token is pushed through the model so the cache covers the full sequence."""
    prompt = np.asarray(prompt, dtype=np.int64).reshape(-1)
    session = SequenceSession(
        model, plan, routers, expert_routers,
        capacity=len(prompt) + gen_len, forced=forced, trace=trace, seq_id=seq_id,
        moe_load=moe_load, expert_drop=expert_drop,
    )
    logits = session.forward(prompt)
    out: list[int] = []
    cur = int(np.argmax(logits[-1]))
    for _ in range(gen_len):
        out.append(cur)
        logits = session.forward([cur])
        cur = int(np.argmax(logits[-1]))
    return out, session.cache


# ---------------------------------------------------------------------------
# Train/infer consistency probe
# ---------------------------------------------------------------------------


def train_infer_gap(
    model: Model,
    tokens: np.ndarray,
    plan: RoutePlan,
    routers: dict[int, RouterState],
    forced: dict[int, np.ndarray] | None = None,
) -> float:
    """Max |masked-training forward - bypass forward| over the batch logits.

    Zero for MLP and block targets and for sequence-level attention;
    token-level attention differs by design (training keeps skipped tokens as
    keys/values on the tape, inference excludes them) and the gap is what this
    probe reports.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    logits_train, tmasks = train_forward(model, tokens, plan, routers, forced=forced)
    hard = {tm.layer: tm.kept for tm in tmasks if tm.kept is not None}
    if forced:
        hard.update({k: np.asarray(v, dtype=bool) for k, v in forced.items()})
    logits_infer, _ = infer_eval(model, tokens, plan, routers, forced=hard)
    return float(np.max(np.abs(logits_train.data - logits_infer)))
