"""Command-line entry point. Commands compose through checkpoint files:

    init           build a fresh backbone checkpoint (optionally a toy corpus)
    pretrain       brief dense pretraining of the backbone
    attach-routers add zero-initialized skip routers per the plan
    train-router   router-only training (optionally a lr/lambda grid search)
    eval           perplexity + capacity report
    bench          wall-clock / FLOP / KV-cache cost report
    trace          per-decision skip trace + layer-wise keep fractions
    drop-baseline  static layer-drop baseline and equal-compute comparison
    expert-drop    static expert-drop baseline on a mixture-of-experts model
    moe-train      train per-expert skip routers

Every command writes `resolved_config.<cmd>.json` next to its outputs and
exits non-zero with a one-line JSON error on stderr when something is wrong
(2 config, 3 checkpoint, 4 plan mismatch, 5 data, 6 other engine errors).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as B
from . import moe as MoE
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    RunConfig,
    dump_run_config,
    load_run_config,
)
from .data import ingest_corpus, split_dataset, synthetic_corpus
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    PlanError,
    SkipgateError,
)
from .model import build_model
from .routing import RoutePlan, RouterSpec, SkipTrace, default_plan, init_routers
from .training import grid_search, pretrain_backbone, train_routers

_EXIT_CODES = [(ConfigError, 2), (CheckpointError, 3), (PlanError, 4), (DataError, 5)]


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    train_overrides = {
        "lam": getattr(args, "lam", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "steps": getattr(args, "steps", None),
        "target_capacity": getattr(args, "capacity", None),
        "batch_size": getattr(args, "batch_size", None),
        "seq_len": getattr(args, "seq_len", None),
    }
    for name, value in train_overrides.items():
        if value is not None:
            setattr(cfg.train, name, value)
    return cfg


def _prepare_out(args, cfg: RunConfig, command: str) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    dump_run_config(cfg, os.path.join(out, f"resolved_config.{command}.json"))
    return out


def _plan_from_settings(cfg: RunConfig, n_layers: int) -> RoutePlan:
    ps = cfg.plan
    if ps.layers is not None:
        plan = RoutePlan(
            [RouterSpec(li, ps.target, ps.granularity) for li in ps.layers], tau=ps.tau
        )
    else:
        plan = default_plan(n_layers, ps.target, ps.granularity, ps.count, ps.tau)
    plan.causal_prefix_fraction = ps.causal_prefix_fraction
    plan.validate(n_layers)
    return plan


def _load_data(args, cfg: RunConfig, seq_len: int):
    data = ingest_corpus(args.corpus, seq_len, cfg.seed, cfg.train.max_windows)
    return split_dataset(data, cfg.train.val_fraction)


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_init(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "init")
    model = build_model(cfg.model, cfg.seed)
    save_checkpoint(os.path.join(out, args.save_as), model, meta={"seed": cfg.seed})
    if args.write_corpus:
        with open(os.path.join(out, "corpus.txt"), "w", encoding="utf-8") as fh:
            fh.write(synthetic_corpus(args.write_corpus, cfg.seed))
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "pretrain")
    bundle = load_checkpoint(args.checkpoint)
    train, _val = _load_data(args, cfg, cfg.pretrain.seq_len)
    steps = args.steps if args.steps is not None else cfg.pretrain.steps
    pretrain_backbone(
        bundle.model, train, steps,
        learning_rate=cfg.pretrain.learning_rate,
        batch_size=cfg.pretrain.batch_size,
        seed=cfg.seed,
        log_path=os.path.join(out, "pretrain_log.jsonl"),
    )
    meta = dict(bundle.meta)
    meta["pretrain_steps"] = int(meta.get("pretrain_steps", 0)) + steps
    save_checkpoint(os.path.join(out, args.save_as), bundle.model, meta=meta)
    return 0


def cmd_attach_routers(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "attach-routers")
    bundle = load_checkpoint(args.checkpoint)
    plan = _plan_from_settings(cfg, bundle.model.cfg.n_layers)
    routers = init_routers(bundle.model, plan)
    save_checkpoint(os.path.join(out, args.save_as), bundle.model, plan, routers,
                    meta=bundle.meta)
    return 0


def cmd_train_router(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "train-router")
    bundle = load_checkpoint(args.checkpoint)
    if bundle.plan is None or not bundle.routers:
        raise PlanError("checkpoint has no routers; run attach-routers first")
    train, val = _load_data(args, cfg, cfg.train.seq_len)
    if args.grid:
        result, routers = grid_search(bundle.model, bundle.plan, train, val, cfg.train)
        _write_json(os.path.join(out, "grid_results.json"), result.to_dict())
        bundle.routers = routers
    else:
        train_routers(
            bundle.model, train, cfg.train, bundle.plan, bundle.routers,
            log_path=os.path.join(out, "train_log.jsonl"),
        )
    save_checkpoint(os.path.join(out, args.save_as), bundle.model, bundle.plan,
                    bundle.routers, meta=bundle.meta)
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "eval")
    bundle = load_checkpoint(args.checkpoint)
    _train, val = _load_data(args, cfg, cfg.train.seq_len)
    use_routers = bundle.plan is not None and not args.dense
    report = B.evaluate_ppl(
        bundle.model, val,
        bundle.plan if use_routers else None,
        bundle.routers if use_routers else None,
        expert_routers=bundle.expert_routers,
        batch_size=cfg.eval.batch_size,
    )
    payload = report.to_dict()
    if use_routers and any(
        s.granularity == "token" and s.target == "attention"
        for s in bundle.plan.routers
    ):
        # token-level attention masks outputs in training but excludes the
        # skipped tokens at inference; surface the resulting gap
        from .routing import train_infer_gap

        probe = val.inputs[: min(4, len(val))]
        payload["train_infer_gap"] = train_infer_gap(
            bundle.model, probe, bundle.plan, bundle.routers
        )
    _write_json(os.path.join(out, "eval_report.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "bench")
    bundle = load_checkpoint(args.checkpoint)
    bs = cfg.bench
    report = B.benchmark_speed(
        bundle.model, bundle.plan, bundle.routers,
        expert_routers=bundle.expert_routers,
        batch=args.batch or bs.batch,
        seq_len=args.bench_seq_len or bs.seq_len,
        gen_len=args.gen_len or bs.gen_len,
        repeats=args.repeats or bs.repeats,
        seed=cfg.seed,
    )
    report.write_json(os.path.join(out, "cost_report.json"))
    if args.csv:
        report.write_csv(os.path.join(out, "cost_report.csv"))
    print(json.dumps({"speedup_total": report.speedup_total}, sort_keys=True))
    return 0


def cmd_trace(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "trace")
    bundle = load_checkpoint(args.checkpoint)
    if bundle.plan is None:
        raise PlanError("checkpoint has no routing plan; nothing to trace")
    _train, val = _load_data(args, cfg, cfg.train.seq_len)
    trace = SkipTrace()
    masks = []
    B.evaluate_ppl(
        bundle.model, val, bundle.plan, bundle.routers,
        expert_routers=bundle.expert_routers,
        batch_size=cfg.eval.batch_size, trace=trace, collect_masks=masks,
    )
    B.export_trace(trace, os.path.join(out, "trace.jsonl"))
    if args.csv:
        B.export_trace(trace, os.path.join(out, "trace.csv"), as_csv=True)
    summary = {"keep_fraction": {str(k): v for k, v in B.skip_ratio_summary(trace).items()}}
    if any(s.granularity == "token" for s in bundle.plan.routers):
        # batched execution of ragged token sets pays for padding; report both
        from .flops import count_flops, padded_attention_flops

        summary["attention_flops_ideal"] = sum(
            count_flops(bundle.model.cfg, m.seq_len, m).attention_total() for m in masks
        )
        summary["attention_flops_padded"] = sum(
            padded_attention_flops(bundle.model.cfg, m) for m in masks
        )
    _write_json(os.path.join(out, "trace_summary.json"), summary)
    return 0


def cmd_drop_baseline(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "drop-baseline")
    bundle = load_checkpoint(args.checkpoint)
    train, val = _load_data(args, cfg, cfg.train.seq_len)
    calib = train.inputs[: min(64, len(train))]
    target = args.target or cfg.plan.target
    drop = B.layer_drop_baseline(bundle.model, target, args.drop_count, calib)
    dplan, drouters = B.drop_plan_routing(bundle.model, drop)
    report = B.evaluate_ppl(
        bundle.model, val, dplan, drouters,
        batch_size=cfg.eval.batch_size,
        forced={li: np.zeros(len(val), dtype=bool) for li in drop.dropped},
        score_forced=False,
    )
    payload = {"plan": drop.to_dict(), "static_ppl": report.ppl}
    if bundle.plan is not None and bundle.routers:
        payload["equal_compute"] = B.equal_compute_report(
            bundle.model, bundle.plan, bundle.routers, val,
            args.drop_count, calib, batch_size=cfg.eval.batch_size,
        )
    _write_json(os.path.join(out, "drop_report.json"), payload)
    print(json.dumps({"static_ppl": report.ppl}, sort_keys=True))
    return 0


def cmd_expert_drop(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "expert-drop")
    bundle = load_checkpoint(args.checkpoint)
    if bundle.model.cfg.moe is None:
        raise PlanError("expert-drop needs a mixture-of-experts checkpoint")
    train, val = _load_data(args, cfg, cfg.train.seq_len)
    calib = train.inputs[: min(64, len(train))]
    importance = MoE.calibrate_gate_mass(bundle.model, calib)
    plan = MoE.expert_drop_baseline(bundle.model, importance, args.drop_fraction)
    dense = B.evaluate_ppl(bundle.model, val, batch_size=cfg.eval.batch_size)
    pruned = B.evaluate_ppl(
        bundle.model, val, batch_size=cfg.eval.batch_size, expert_drop=plan
    )
    _write_json(
        os.path.join(out, "expert_drop_report.json"),
        {
            "drop_fraction": args.drop_fraction,
            "n_dropped": plan.n_dropped,
            "survivors": {str(k): v.tolist() for k, v in sorted(plan.survivors.items())},
            "dense_ppl": dense.ppl,
            "pruned_ppl": pruned.ppl,
        },
    )
    return 0


def cmd_moe_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args, cfg, "moe-train")
    bundle = load_checkpoint(args.checkpoint)
    if bundle.model.cfg.moe is None:
        raise PlanError("moe-train needs a mixture-of-experts checkpoint")
    expert_routers = bundle.expert_routers or MoE.ExpertSkipRouters(
        bundle.model, tau=cfg.plan.tau
    )
    train, val = _load_data(args, cfg, cfg.train.seq_len)
    train_routers(
        bundle.model, train, cfg.train, expert_routers=expert_routers,
        log_path=os.path.join(out, "train_log.jsonl"),
    )
    load = MoE.ExpertLoadReport()
    B.evaluate_ppl(
        bundle.model, val, expert_routers=expert_routers,
        batch_size=cfg.eval.batch_size, moe_load=load,
    )
    load.write_jsonl(os.path.join(out, "expert_load.jsonl"))
    save_checkpoint(os.path.join(out, args.save_as), bundle.model,
                    expert_routers=expert_routers, meta=bundle.meta)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, save_as: str | None = None,
                corpus: bool = False, checkpoint: bool = False) -> None:
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    if save_as:
        p.add_argument("--save-as", default=save_as, help="checkpoint filename to write")
    if corpus:
        p.add_argument("--corpus", required=True, help="UTF-8 text corpus")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="input checkpoint path")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--capacity", type=float, default=None, help="target capacity s")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="skipgate",
        description="Dynamic layer skipping for a desk-scale transformer: "
                    "train lightweight gates, bypass layers at inference, "
                    "account for every FLOP and cache byte.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="build a fresh backbone checkpoint")
    _add_common(p, save_as="model.ckpt")
    p.add_argument("--write-corpus", type=int, default=0, metavar="N_CHARS",
                   help="also write a synthetic corpus of N characters")
    p.set_defaults(fn=cmd_init)

    p = sub.add_parser("pretrain", help="brief dense pretraining")
    _add_common(p, save_as="pretrained.ckpt", corpus=True, checkpoint=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("attach-routers", help="attach zero-initialized routers")
    _add_common(p, save_as="routed.ckpt", checkpoint=True)
    p.set_defaults(fn=cmd_attach_routers)

    p = sub.add_parser("train-router", help="router-only training")
    _add_common(p, save_as="trained.ckpt", corpus=True, checkpoint=True)
    _add_train_flags(p)
    p.add_argument("--grid", action="store_true", help="grid-search lr and lambda first")
    p.set_defaults(fn=cmd_train_router)

    p = sub.add_parser("eval", help="perplexity and capacity report")
    _add_common(p, corpus=True, checkpoint=True)
    p.add_argument("--dense", action="store_true", help="ignore routers")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="speed / FLOP / cache cost report")
    _add_common(p, checkpoint=True)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--bench-seq-len", type=int, default=None)
    p.add_argument("--gen-len", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("trace", help="record routing decisions over the eval set")
    _add_common(p, corpus=True, checkpoint=True)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("drop-baseline", help="static layer-drop baseline")
    _add_common(p, corpus=True, checkpoint=True)
    p.add_argument("--drop-count", type=int, required=True)
    p.add_argument("--target", choices=("attention", "mlp", "block"), default=None)
    p.set_defaults(fn=cmd_drop_baseline)

    p = sub.add_parser("expert-drop", help="static expert-drop baseline")
    _add_common(p, corpus=True, checkpoint=True)
    p.add_argument("--drop-fraction", type=float, default=0.25)
    p.set_defaults(fn=cmd_expert_drop)

    p = sub.add_parser("moe-train", help="train per-expert skip routers")
    _add_common(p, save_as="moe_trained.ckpt", corpus=True, checkpoint=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_moe_train)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SkipgateError as exc:
        code = 6
        for cls, c in _EXIT_CODES:
            if isinstance(exc, cls):
                code = c
                break
        print(
            json.dumps({"error": type(exc).__name__, "code": code, "message": str(exc)}),
            file=sys.stderr,
        )
        return code


if __name__ == "__main__":
    sys.exit(main())
