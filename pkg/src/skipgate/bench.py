"""Measurement harness: perplexity evaluation, wall-clock speed benchmarks
with FLOP and KV-cache accounting, layer-wise skip traces, and the static
Layer-Drop baseline with an equal-compute comparison mode.

Wall-clock numbers come with hardware metadata and are never asserted against
published speedups; the quantitative burden sits on the FLOP/byte accounting,
which is exact by construction.
"""

from __future__ import annotations

import csv
import json
import platform
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, Dataset
from .errors import ConfigError, DataError, PlanError
from .flops import count_flops
from .model import Model
from .routing import (
    RoutePlan,
    RouterSpec,
    RouterState,
    SequenceSession,
    SkipMask,
    SkipTrace,
    TraceRecord,
    infer_eval,
)
from .tensor import FlopCounter


def _ce_np(logits: np.ndarray, targets: np.ndarray) -> tuple[float, int]:
    """Summed next-token cross entropy and the number of non-pad positions."""
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    valid = t != PAD
    if not valid.any():
        return 0.0, 0
    flat = flat[valid]
    t = t[valid]
    m = flat.max(axis=1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(flat.shape[0]), t]
    return float((lse - picked).sum()), int(t.shape[0])


@dataclass
class EvalReport:
    ppl: float
    mean_ce: float
    n_positions: int
    capacity: float | None = None
    per_layer_capacity: dict[int, float] | None = None

    def to_dict(self) -> dict:
        return {
            "ppl": self.ppl,
            "mean_ce": self.mean_ce,
            "n_positions": self.n_positions,
            "capacity": self.capacity,
            "per_layer_capacity": (
                {str(k): v for k, v in sorted(self.per_layer_capacity.items())}
                if self.per_layer_capacity
                else None
            ),
        }


def evaluate_ppl(
    model: Model,
    data: Dataset,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers=None,
    batch_size: int = 16,
    forced: dict[int, np.ndarray] | None = None,
    quota_capacity: float | None = None,
    trace: SkipTrace | None = None,
    moe_load=None,
    expert_drop=None,
    score_forced: bool = True,
    collect_masks: list[SkipMask] | None = None,
) -> EvalReport:
    """exp(mean next-token cross entropy) over the held-out windows."""
    if len(data) == 0:
        raise DataError("evaluation dataset is empty")
    ce_sum, n_pos = 0.0, 0
    kept = total = 0
    per_layer: dict[int, list[int]] = {}
    for start in range(0, len(data), batch_size):
        inp = data.inputs[start : start + batch_size]
        tgt = data.targets[start : start + batch_size]
        batch_forced = None
        if forced is not None:
            batch_forced = {li: m[start : start + batch_size] for li, m in forced.items()}
        logits, mask = infer_eval(
            model, inp, plan, routers, expert_routers,
            forced=batch_forced, quota_capacity=quota_capacity,
            trace=trace, seq_offset=start, moe_load=moe_load,
            expert_drop=expert_drop, score_forced=score_forced,
        )
        s, c = _ce_np(logits, tgt)
        ce_sum += s
        n_pos += c
        for dec in mask.layers:
            kept += dec.n_kept
            total += dec.n_decisions
            acc = per_layer.setdefault(dec.layer, [0, 0])
            acc[0] += dec.n_kept
            acc[1] += dec.n_decisions
        if collect_masks is not None:
            collect_masks.append(mask)
    mean_ce = ce_sum / n_pos
    return EvalReport(
        ppl=float(np.exp(mean_ce)),
        mean_ce=float(mean_ce),
        n_positions=n_pos,
        capacity=(kept / total) if total else None,
        per_layer_capacity=(
            {li: a[0] / a[1] for li, a in sorted(per_layer.items())} if per_layer else None
        ),
    )


# ---------------------------------------------------------------------------
# Wall-clock benchmark
# ---------------------------------------------------------------------------


@dataclass
class RunStats:
    prefill_s: float
    generate_s: float
    prefill_tok_per_s: float
    generate_tok_per_s: float
    total_tok_per_s: float
    flops_total: int
    flops_attention: int
    kv_bytes: int
    capacity: float | None = None


@dataclass
class CostReport:
    dense: RunStats
    routed: RunStats | None
    speedup_total: float | None
    speedup_prefill: float | None
    speedup_generate: float | None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dense": vars(self.dense),
            "routed": vars(self.routed) if self.routed else None,
            "speedup_total": self.speedup_total,
            "speedup_prefill": self.speedup_prefill,
            "speedup_generate": self.speedup_generate,
            "meta": self.meta,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        routed = self.routed or RunStats(*([float("nan")] * 5), 0, 0, 0)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "dense", "routed"])
            for key in vars(self.dense):
                w.writerow([key, getattr(self.dense, key), getattr(routed, key)])
            w.writerow(["speedup_total", "", self.speedup_total])


def _timed_run(
    model: Model,
    prompts: np.ndarray,
    gen_len: int,
    plan: RoutePlan | None,
    routers: dict[int, RouterState] | None,
    expert_routers,
    forced,
    trace: SkipTrace | None = None,
) -> tuple[float, float, int]:
    """One full prefill+generate pass over the batch (sequences processed
    individually, matching the per-sequence cache layout); returns timings and
    total cache bytes."""
    batch, seq_len = prompts.shape
    sessions = []
    cur = np.zeros(batch, dtype=np.int64)
    t0 = time.perf_counter()
    for b in range(batch):
        sess = SequenceSession(
            model, plan, routers, expert_routers,
            capacity=seq_len + gen_len,
            forced=forced, trace=trace, seq_id=b,
        )
        logits = sess.forward(prompts[b])
        cur[b] = int(np.argmax(logits[-1]))
        sessions.append(sess)
    t1 = time.perf_counter()
    for _ in range(gen_len):
        for b, sess in enumerate(sessions):
            logits = sess.forward([cur[b]])
            cur[b] = int(np.argmax(logits[-1]))
    t2 = time.perf_counter()
    kv_bytes = sum(sess.cache.nbytes() for sess in sessions)
    return t1 - t0, t2 - t1, kv_bytes


def _thread_limit(threads: int | None):
    if threads is None:
        from contextlib import nullcontext

        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def benchmark_speed(
    model: Model,
    plan: RoutePlan | None = None,
    routers: dict[int, RouterState] | None = None,
    expert_routers=None,
    batch: int = 4,
    seq_len: int = 128,
    gen_len: int = 32,
    repeats: int = 3,
    seed: int = 0,
    forced=None,
    threads: int | None = 1,
) -> CostReport:
    """Wall-clock comparison of the dense model against the routed model on
    identical prompts.

    The timed region is pinned to `threads` BLAS threads (default one core)
    and dense/routed repeats are interleaved; each speedup is the median of
    the per-repeat time ratios, which cancels slow machine drift, while the
    per-variant times are medians over repeats. Two warm-up rounds are
    discarded. FLOPs, capacity and cache bytes come from an untimed
    instrumented pass."""
    if seq_len + gen_len > model.cfg.max_seq_len:
        raise ConfigError(
            f"benchmark needs seq_len+gen_len <= max_seq_len "
            f"({seq_len}+{gen_len} > {model.cfg.max_seq_len}); shorten the "
            f"benchmark or raise the model's context"
        )
    rng = np.random.default_rng(seed)
    prompts = rng.integers(0, model.cfg.vocab_size, size=(batch, seq_len), dtype=np.int64)
    variants = [("dense", None, None)]
    if plan is not None:
        variants.append(("routed", plan, routers))

    times: dict[str, list[tuple[float, float, int]]] = {name: [] for name, _, _ in variants}
    with _thread_limit(threads):
        for _, p, r in variants:
            for _ in range(2):
                _timed_run(model, prompts, gen_len, p, r, expert_routers, forced)
        for _ in range(repeats):
            for name, p, r in variants:
                times[name].append(
                    _timed_run(model, prompts, gen_len, p, r, expert_routers, forced)
                )

    def summarize(name, p, r) -> RunStats:
        trace = SkipTrace() if p is not None else None
        with FlopCounter() as fc:
            _timed_run(model, prompts, gen_len, p, r, expert_routers, forced, trace=trace)
        capacity = None
        if trace is not None and len(trace):
            capacity = sum(rec.kept for rec in trace.records) / len(trace)
        attn = sum(
            v for k, v in fc.by_scope.items()
            if k.split(".")[-1] in ("attn_proj", "attn_score", "attn_value")
        )
        tp = float(np.median([t[0] for t in times[name]]))
        tg = float(np.median([t[1] for t in times[name]]))
        kv_bytes = times[name][-1][2]
        return RunStats(
            prefill_s=tp,
            generate_s=tg,
            prefill_tok_per_s=batch * seq_len / tp,
            generate_tok_per_s=batch * gen_len / tg,
            total_tok_per_s=batch * (seq_len + gen_len) / (tp + tg),
            flops_total=fc.total(),
            flops_attention=attn,
            kv_bytes=kv_bytes,
            capacity=capacity,
        )

    def paired_speedup(phase) -> float | None:
        if plan is None:
            return None
        ratios = [
            phase(d) / phase(r) for d, r in zip(times["dense"], times["routed"])
        ]
        return float(np.median(ratios))

    dense = summarize("dense", None, None)
    routed = summarize("routed", plan, routers) if plan is not None else None
    meta = {
        "batch": batch,
        "seq_len": seq_len,
        "gen_len": gen_len,
        "repeats": repeats,
        "threads": threads,
        "numpy": np.__version__,
        "platform": platform.platform(),
        "processor": platform.processor() or "unknown",
    }
    return CostReport(
        dense=dense,
        routed=routed,
        speedup_total=paired_speedup(lambda t: t[0] + t[1]),
        speedup_prefill=paired_speedup(lambda t: t[0]),
        speedup_generate=paired_speedup(lambda t: t[1]),
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Static Layer-Drop baseline and the equal-compute comparison
# ---------------------------------------------------------------------------


@dataclass
class DropPlan:
    target: str
    dropped: list[int]
    importance: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "dropped": self.dropped,
            "importance": {str(k): v for k, v in sorted(self.importance.items())},
        }


def layer_importance(model: Model, tokens: np.ndarray, target: str) -> np.ndarray:
    """Per-layer redundancy proxy: mean(1 - cos(unit input, unit output)) over
    calibration rows; low importance means the unit barely moves its input."""
    from .model import attn_delta_infer, mlp_delta_infer
    from .moe import moe_rows_infer

    tokens = np.asarray(tokens, dtype=np.int64)
    B, L = tokens.shape
    cfg = model.cfg
    x = model.p("tok_emb").data[tokens].copy()
    pos = np.arange(L)
    imp = np.zeros(cfg.n_layers, dtype=np.float64)

    def cos_gap(a: np.ndarray, b: np.ndarray) -> float:
        a2 = a.reshape(-1, cfg.d_model)
        b2 = b.reshape(-1, cfg.d_model)
        num = (a2 * b2).sum(axis=1)
        den = np.linalg.norm(a2, axis=1) * np.linalg.norm(b2, axis=1) + 1e-12
        return float(np.mean(1.0 - num / den))

    for li in range(cfg.n_layers):
        unit_in = x.copy() if target in ("attention", "block") else None
        x = x + attn_delta_infer(model, li, x, pos)
        if target == "attention":
            imp[li] = cos_gap(unit_in, x)
        if target == "mlp":
            unit_in = x.copy()
        rows = x.reshape(B * L, cfg.d_model)
        if cfg.moe is None:
            rows += mlp_delta_infer(model, li, rows)
        else:
            delta, _ = moe_rows_infer(model, li, rows)
            rows += delta
        if target == "mlp":
            imp[li] = cos_gap(unit_in, x)
        elif target == "block":
            imp[li] = cos_gap(unit_in, x)
    return imp


def layer_drop_baseline(
    model: Model,
    target: str,
    drop_count: int,
    calib_tokens: np.ndarray,
    eligible: list[int] | None = None,
) -> DropPlan:
    """Statically remove the `drop_count` least-important layers (ties drop
    the deeper layer first). The final layer is never eligible."""
    n_layers = model.cfg.n_layers
    if eligible is None:
        eligible = list(range(n_layers - 1))
    if (n_layers - 1) in eligible:
        raise PlanError("the final layer is exempt from dropping")
    if drop_count >= len(eligible):
        raise PlanError(f"cannot drop {drop_count} of {len(eligible)} eligible layers")
    importance = layer_importance(model, calib_tokens, target)
    ranked = sorted(eligible, key=lambda li: (importance[li], -li))
    dropped = sorted(ranked[:drop_count])
    return DropPlan(target, dropped, {li: float(importance[li]) for li in eligible})


def drop_plan_routing(model: Model, drop: DropPlan):
    """Express a static drop as a routed plan with forced always-skip masks."""
    plan = RoutePlan([RouterSpec(li, drop.target, "sequence") for li in drop.dropped])
    routers = {
        li: RouterState(model.cfg.d_model, li, drop.target, "sequence")
        for li in drop.dropped
    }
    return plan, routers


def forced_all(drop: DropPlan, batch: int) -> dict[int, np.ndarray]:
    return {li: np.zeros(batch, dtype=bool) for li in drop.dropped}


def equal_compute_report(
    model: Model,
    plan: RoutePlan,
    routers: dict[int, RouterState],
    data: Dataset,
    drop_count: int,
    calib_tokens: np.ndarray,
    batch_size: int = 16,
) -> dict:
    """Static drop of `drop_count` layers versus dynamic routing on the
    planned layers, capacity-matched so both runs spend the same FLOP budget.

    The routed side keeps, per layer and per batch, the top-scoring fraction
    of sequences (the deploy-time threshold is replaced by a quantile purely
    for this comparison). The dynamic side is expected to match or beat the
    static drop; a violation is reported as a warning, not a failure.
    """
    target = plan.routers[0].target
    n_routed = len(plan.routers)
    if drop_count >= n_routed:
        raise PlanError(f"drop_count {drop_count} must stay below the {n_routed} routed layers")
    match_capacity = 1.0 - drop_count / n_routed

    drop = layer_drop_baseline(model, target, drop_count, calib_tokens)
    dplan, drouters = drop_plan_routing(model, drop)
    drop_masks: list[SkipMask] = []
    drop_report = evaluate_ppl(
        model, data, dplan, drouters, batch_size=batch_size,
        forced={li: np.zeros(len(data), dtype=bool) for li in drop.dropped},
        score_forced=False, collect_masks=drop_masks,
    )
    mod_masks: list[SkipMask] = []
    mod_report = evaluate_ppl(
        model, data, plan, routers, batch_size=batch_size,
        quota_capacity=match_capacity, collect_masks=mod_masks,
    )
    drop_attn = sum(count_flops(model.cfg, m.seq_len, m).attention_total() for m in drop_masks)
    mod_attn = sum(count_flops(model.cfg, m.seq_len, m).attention_total() for m in mod_masks)
    budget_gap = abs(drop_attn - mod_attn) / max(drop_attn, mod_attn)
    expectation_met = mod_report.ppl <= drop_report.ppl
    if not expectation_met:
        warnings.warn(
            f"dynamic routing ppl {mod_report.ppl:.4f} exceeds static drop "
            f"{drop_report.ppl:.4f} at matched budget",
            stacklevel=2,
        )
    return {
        "target": target,
        "drop_count": drop_count,
        "match_capacity": match_capacity,
        "dropped_layers": drop.dropped,
        "drop_ppl": drop_report.ppl,
        "routed_ppl": mod_report.ppl,
        "drop_attention_flops": int(drop_attn),
        "routed_attention_flops": int(mod_attn),
        "budget_gap": budget_gap,
        "expectation_met": bool(expectation_met),
    }


# ---------------------------------------------------------------------------
# Trace export
# ---------------------------------------------------------------------------


def export_trace(trace: SkipTrace, path, as_csv: bool = False) -> None:
    if as_csv:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["seq", "layer", "pos", "score", "kept"])
            for r in trace.records:
                w.writerow([r.seq, r.layer, "" if r.pos is None else r.pos,
                            "" if r.score is None else repr(r.score), int(r.kept)])
        return
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace.records:
            fh.write(
                json.dumps(
                    {"seq": r.seq, "layer": r.layer, "pos": r.pos,
                     "score": r.score, "kept": r.kept},
                    sort_keys=True,
                )
                + "\n"
            )


def load_trace(path) -> SkipTrace:
    trace = SkipTrace()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            trace.records.append(
                TraceRecord(d["seq"], d["layer"], d["pos"], d["score"], d["kept"])
            )
    return trace


def skip_ratio_summary(trace: SkipTrace) -> dict[int, float]:
    """Per-layer keep fraction over every recorded decision."""
    kept: dict[int, list[int]] = {}
    for r in trace.records:
        acc = kept.setdefault(r.layer, [0, 0])
        acc[0] += int(r.kept)
        acc[1] += 1
    return {li: a[0] / a[1] for li, a in sorted(kept.items())}
