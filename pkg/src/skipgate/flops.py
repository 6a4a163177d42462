"""Analytic FLOP accounting that mirrors the inference engine's matrix
products exactly (2*m*k*n per product, elementwise work excluded on both
sides). The test suite pins analytic == instrumented for arbitrary masks; any
engine change that shifts a matmul shape must be reflected here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig
from .routing import SkipMask


@dataclass
class FlopReport:
    per_scope: dict[str, int] = field(default_factory=dict)

    def add(self, scope: str, flops: int) -> None:
        if flops:
            self.per_scope[scope] = self.per_scope.get(scope, 0) + int(flops)

    def total(self) -> int:
        return sum(self.per_scope.values())

    def category_total(self, *categories: str) -> int:
        return sum(
            v for k, v in self.per_scope.items() if k.split(".")[-1] in categories
        )

    def attention_total(self) -> int:
        return self.category_total("attn_proj", "attn_score", "attn_value")

    def nonzero(self) -> dict[str, int]:
        return {k: v for k, v in self.per_scope.items() if v}

    def per_layer(self, n_layers: int) -> list[dict[str, int]]:
        out = []
        for li in range(n_layers):
            prefix = f"L{li}."
            out.append(
                {k[len(prefix):]: v for k, v in self.per_scope.items() if k.startswith(prefix)}
            )
        return out


def _attn_full(report: FlopReport, li: int, m: int, L: int, d: int) -> None:
    report.add(f"L{li}.attn_proj", 8 * m * L * d * d)
    report.add(f"L{li}.attn_score", 2 * m * L * L * d)
    report.add(f"L{li}.attn_value", 2 * m * L * L * d)


def _mlp_rows(report: FlopReport, cfg: ModelConfig, li: int, rows: int) -> None:
    mats = 3 if cfg.mlp_act == "swiglu" else 2
    report.add(f"L{li}.mlp", mats * 2 * rows * cfg.d_model * cfg.mlp_hidden)


def _moe_rows(
    report: FlopReport,
    cfg: ModelConfig,
    li: int,
    rows: int,
    moe_report=None,
    moe_skip_active: bool = False,
    survivors: np.ndarray | None = None,
) -> None:
    d = cfg.d_model
    he = cfg.expert_hidden
    width = cfg.moe.n_experts if survivors is None else int(survivors.size)
    k_eff = min(cfg.moe.top_k, width)
    report.add(f"L{li}.moe_gate", 2 * rows * d * width)
    if moe_report is not None and li in moe_report.executed:
        executed = int(moe_report.executed[li].sum())
        assigned = int(moe_report.assigned[li].sum())
    else:
        executed = assigned = rows * k_eff
    if moe_skip_active:
        report.add(f"L{li}.moe_router", 2 * assigned * d)
    report.add(f"L{li}.moe_expert", 6 * executed * d * he)


def count_flops(
    cfg: ModelConfig,
    seq_len: int,
    skip_mask: SkipMask | None = None,
    batch: int = 1,
    moe_report=None,
    moe_skip_active: bool = False,
    expert_drop=None,
) -> FlopReport:
    """Per-layer FLOP counts for a full (prefill-style) forward.

    With a mask, bypassed units contribute nothing; attention cost carries the
    seq_len^2 score/value terms. Router scoring is counted for every routed
    layer whose decisions carry scores (static drops force decisions without
    scoring). MoE accounting follows the executed/assigned counts of a load
    report when one is supplied, otherwise assumes dense top-k execution.
    """
    if skip_mask is not None:
        batch = skip_mask.batch
        seq_len = skip_mask.seq_len
    B, L, d = batch, seq_len, cfg.d_model
    report = FlopReport()

    for li in range(cfg.n_layers):
        dec = skip_mask.at(li) if skip_mask is not None else None
        survivors = expert_drop.at(li) if expert_drop is not None else None

        def mlp_slot(rows: int) -> None:
            if cfg.moe is None:
                _mlp_rows(report, cfg, li, rows)
            else:
                _moe_rows(report, cfg, li, rows, moe_report, moe_skip_active, survivors)

        if dec is None:
            _attn_full(report, li, B, L, d)
            mlp_slot(B * L)
            continue

        if dec.scores is not None:
            if dec.granularity == "sequence":
                report.add(f"L{li}.router", 2 * B * d)
            else:
                report.add(f"L{li}.router", 2 * B * L * d)

        if dec.target == "attention":
            if dec.granularity == "sequence":
                _attn_full(report, li, dec.n_kept, L, d)
            else:
                for b in range(B):
                    s = int(dec.kept[b].sum())
                    report.add(f"L{li}.attn_proj", 8 * s * d * d)
                    report.add(f"L{li}.attn_score", 2 * s * s * d)
                    report.add(f"L{li}.attn_value", 2 * s * s * d)
            mlp_slot(B * L)
        elif dec.target == "mlp":
            _attn_full(report, li, B, L, d)
            rows = dec.n_kept * L if dec.granularity == "sequence" else dec.n_kept
            mlp_slot(rows)
        else:  # block
            if dec.granularity == "sequence":
                _attn_full(report, li, dec.n_kept, L, d)
                mlp_slot(dec.n_kept * L)
            else:
                for b in range(B):
                    s = int(dec.kept[b].sum())
                    if s == 0:
                        continue  # engine skips the layer outright: no queries, no k/v
                    report.add(f"L{li}.attn_proj", 4 * s * d * d + 4 * L * d * d)
                    report.add(f"L{li}.attn_score", 2 * s * L * d)
                    report.add(f"L{li}.attn_value", 2 * s * L * d)
                mlp_slot(int(dec.kept.sum()))

    report.add("lm_head", 2 * B * L * d * cfg.vocab_size)
    return report


def padded_attention_flops(cfg: ModelConfig, skip_mask: SkipMask) -> int:
    """Attention FLOPs a padded batched kernel would spend on token-level
    routed layers: every sequence is charged for the batch's largest kept set
    (ragged token counts force padding in batched execution). Sequence-level
    and dense layers cost the same as the ideal accounting.
    """
    d, L = cfg.d_model, skip_mask.seq_len
    total = count_flops(cfg, L, skip_mask).attention_total()
    for dec in skip_mask.layers:
        if dec.granularity != "token" or dec.target not in ("attention", "block"):
            continue
        kept = dec.kept.sum(axis=1)
        pad = int(kept.max()) if kept.size else 0
        for b in range(skip_mask.batch):
            s = int(kept[b])
            if dec.target == "attention":
                ideal = 8 * s * d * d + 4 * s * s * d
                padded = 8 * pad * d * d + 4 * pad * pad * d
            else:
                ideal = (4 * s * d * d + 4 * L * d * d + 4 * s * L * d) if s else 0
                padded = (4 * pad * d * d + 4 * L * d * d + 4 * pad * L * d) if pad else 0
            total += padded - ideal
    return total
