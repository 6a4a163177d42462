"""Decoder-only transformer backbone: pre-norm blocks with RMS normalization,
rotary positions, causal multi-head attention with a KV cache, and either a
gated (SwiGLU-style) MLP or a top-k mixture-of-experts layer in the MLP slot.

Two forward implementations exist on purpose: raw-numpy kernels for inference
(`*_np` / `*_infer`) and tape-op kernels for training (`*_train`). They mirror
each other operation for operation so that a unit mask of 1.0 reproduces the
dense output bitwise; the test suite pins that equivalence.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError, ShapeError
from .tensor import Tensor, flop_scope, mm


@dataclass
class MoESettings:
    n_experts: int
    top_k: int
    expert_hidden: int | None = None  # defaults to mlp_hidden
    renormalize: bool = False  # renormalize selected gate weights (off: raw softmax scores)

    def validate(self) -> None:
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(
                f"top_k must lie in [1, n_experts], got k={self.top_k}, n={self.n_experts}"
            )


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 320
    n_layers: int = 16
    n_heads: int = 4
    head_dim: int = 80
    mlp_hidden: int = 1280
    max_seq_len: int = 512
    mlp_act: str = "swiglu"  # "swiglu" or "gelu"
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    moe: MoESettings | None = None

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model must equal n_heads*head_dim "
                f"({self.d_model} != {self.n_heads}*{self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary positions, got {self.head_dim}")
        if self.mlp_act not in ("swiglu", "gelu"):
            raise ConfigError(f"mlp_act must be 'swiglu' or 'gelu', got {self.mlp_act!r}")
        if self.moe is not None:
            self.moe.validate()

    @property
    def expert_hidden(self) -> int:
        assert self.moe is not None
        return self.moe.expert_hidden or self.mlp_hidden


class Model:
    """Named parameter store plus derived constants (rope tables, scales)."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        self.rope_cos, self.rope_sin = _rope_tables(cfg)
        self.attn_scale = np.float32(1.0 / np.sqrt(cfg.head_dim))

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_trainable(self, value: bool) -> None:
        for t in self.params.values():
            t.requires_grad = value
            t.grad = None

    def checksums(self) -> dict[str, int]:
        return {name: zlib.crc32(t.data.tobytes()) for name, t in self.params.items()}


def _rope_tables(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    half = cfg.head_dim // 2
    inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.outer(np.arange(cfg.max_seq_len, dtype=np.float64), inv_freq)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _layer_param_shapes(cfg: ModelConfig, li: int) -> list[tuple[str, tuple[int, ...]]]:
    d, h = cfg.d_model, cfg.mlp_hidden
    shapes = [
        (f"layers.{li}.attn_norm", (d,)),
        (f"layers.{li}.attn.wq", (d, d)),
        (f"layers.{li}.attn.wk", (d, d)),
        (f"layers.{li}.attn.wv", (d, d)),
        (f"layers.{li}.attn.wo", (d, d)),
        (f"layers.{li}.mlp_norm", (d,)),
    ]
    if cfg.moe is None:
        if cfg.mlp_act == "swiglu":
            shapes += [
                (f"layers.{li}.mlp.w_gate", (d, h)),
                (f"layers.{li}.mlp.w_in", (d, h)),
                (f"layers.{li}.mlp.w_out", (h, d)),
            ]
        else:
            shapes += [
                (f"layers.{li}.mlp.w_in", (d, h)),
                (f"layers.{li}.mlp.w_out", (h, d)),
            ]
    else:
        he = cfg.expert_hidden
        shapes.append((f"layers.{li}.moe.gate", (d, cfg.moe.n_experts)))
        for e in range(cfg.moe.n_experts):
            shapes += [
                (f"layers.{li}.moe.expert{e}.w_gate", (d, he)),
                (f"layers.{li}.moe.expert{e}.w_in", (d, he)),
                (f"layers.{li}.moe.expert{e}.w_out", (he, d)),
            ]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [("tok_emb", (cfg.vocab_size, cfg.d_model))]
    for li in range(cfg.n_layers):
        shapes += _layer_param_shapes(cfg, li)
    shapes += [("final_norm", (cfg.d_model,)), ("lm_head", (cfg.d_model, cfg.vocab_size))]
    return shapes


def build_model(cfg: ModelConfig, seed: int = 0, init_std: float = 0.02) -> Model:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith("norm"):
            data = np.ones(shape, dtype=np.float32)
        else:
            data = rng.normal(0.0, init_std, size=shape).astype(np.float32)
        params[name] = Tensor(data)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


@dataclass
class LayerKV:
    k: np.ndarray  # [n_heads, capacity, head_dim]
    v: np.ndarray
    length: int = 0
    positions: list[int] = field(default_factory=list)

    def append(self, k_new: np.ndarray, v_new: np.ndarray, positions: np.ndarray) -> None:
        n = k_new.shape[1]
        if self.length + n > self.k.shape[1]:
            raise CapacityError(
                f"KV cache overflow: {self.length}+{n} > capacity {self.k.shape[1]}"
            )
        self.k[:, self.length : self.length + n] = k_new
        self.v[:, self.length : self.length + n] = v_new
        self.positions.extend(int(p) for p in positions)
        self.length += n

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.k[:, : self.length], self.v[:, : self.length]


class KVCache:
    """Per-layer key/value buffers; a layer bypassed for this sequence has no entry."""

    def __init__(self, cfg: ModelConfig, capacity: int | None = None):
        self.cfg = cfg
        self.capacity = capacity if capacity is not None else cfg.max_seq_len
        self.layers: dict[int, LayerKV] = {}

    def layer(self, li: int) -> LayerKV:
        if li not in self.layers:
            shape = (self.cfg.n_heads, self.capacity, self.cfg.head_dim)
            self.layers[li] = LayerKV(
                np.zeros(shape, dtype=np.float32), np.zeros(shape, dtype=np.float32)
            )
        return self.layers[li]

    def nbytes(self) -> int:
        return sum(
            2 * self.cfg.n_heads * kv.length * self.cfg.head_dim * 4
            for kv in self.layers.values()
        )


# ---------------------------------------------------------------------------
# Shared numeric helpers (used identically by both forward paths)
# ---------------------------------------------------------------------------

NEG_INF = np.float32(-np.inf)


def rms_np(x: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray:
    r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + np.float32(eps))
    return (x / r) * w


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return T._softmax_np(x, axis)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return T._sigmoid_np(x)


def rope_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def causal_bias(q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    """Additive attention bias: 0 where the key position precedes or equals
    the query position, -inf elsewhere."""
    allowed = k_pos[None, :] <= q_pos[:, None]
    return np.where(allowed, np.float32(0), NEG_INF)


# ---------------------------------------------------------------------------
# Inference kernels (raw numpy, FLOPs counted through tensor.mm)
# ---------------------------------------------------------------------------


def _split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    # [..., L, d] -> [..., H, L, hd]
    new = x.reshape(x.shape[:-1] + (n_heads, head_dim))
    return np.moveaxis(new, -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # [..., H, L, hd] -> [..., L, d]
    moved = np.moveaxis(x, -3, -2)
    return np.ascontiguousarray(moved).reshape(moved.shape[:-2] + (-1,))


def attn_delta_infer(
    model: Model,
    li: int,
    x: np.ndarray,
    q_pos: np.ndarray,
    kv_pos: np.ndarray | None = None,
    x_kv: np.ndarray | None = None,
    cache: LayerKV | None = None,
    write_cache: bool = False,
) -> np.ndarray:
    """Causal attention sublayer delta (norm -> qkv -> mix -> output proj).

    `x` holds the query rows (shape [..., nq, d]); by default keys/values come
    from the same rows. `x_kv`/`kv_pos` supply a different key/value row set
    (block-level token routing). With a cache, stored keys/values are
    prepended and the fresh ones appended when `write_cache` is set.
    """
    cfg = model.cfg
    eps = cfg.norm_eps
    xq = rms_np(x, model.p(f"layers.{li}.attn_norm").data, eps)
    xkv = xq if x_kv is None else rms_np(x_kv, model.p(f"layers.{li}.attn_norm").data, eps)
    if kv_pos is None:
        kv_pos = q_pos
    with flop_scope(f"L{li}.attn_proj"):
        q = mm(xq, model.p(f"layers.{li}.attn.wq").data)
        k = mm(xkv, model.p(f"layers.{li}.attn.wk").data)
        v = mm(xkv, model.p(f"layers.{li}.attn.wv").data)
    H, hd = cfg.n_heads, cfg.head_dim
    q = _split_heads(q, H, hd)
    k = _split_heads(k, H, hd)
    v = _split_heads(v, H, hd)
    q = rope_np(q, model.rope_cos[q_pos], model.rope_sin[q_pos])
    k = rope_np(k, model.rope_cos[kv_pos], model.rope_sin[kv_pos])
    all_kv_pos = kv_pos
    if cache is not None:
        ck, cv = cache.view()
        cached_pos = np.asarray(cache.positions, dtype=np.int64)
        if write_cache:
            cache.append(k, v, kv_pos)
        k = np.concatenate([ck, k], axis=-2)
        v = np.concatenate([cv, v], axis=-2)
        all_kv_pos = np.concatenate([cached_pos, kv_pos])
    if q.shape[-2] == 0:
        # no kept queries this call (keys/values may still have been cached)
        return np.zeros(x.shape, dtype=np.float32)
    with flop_scope(f"L{li}.attn_score"):
        scores = mm(q, k.swapaxes(-1, -2)) * model.attn_scale
    scores = scores + causal_bias(np.asarray(q_pos), np.asarray(all_kv_pos))
    probs = softmax_np(scores, axis=-1)
    with flop_scope(f"L{li}.attn_value"):
        ctx = mm(probs, v)
    with flop_scope(f"L{li}.attn_proj"):
        return mm(_merge_heads(ctx), model.p(f"layers.{li}.attn.wo").data)


def mlp_delta_infer(model: Model, li: int, rows: np.ndarray) -> np.ndarray:
    """Gated MLP sublayer delta on flat rows [N, d] (norm included)."""
    cfg = model.cfg
    xn = rms_np(rows, model.p(f"layers.{li}.mlp_norm").data, cfg.norm_eps)
    with flop_scope(f"L{li}.mlp"):
        if cfg.mlp_act == "swiglu":
            g = mm(xn, model.p(f"layers.{li}.mlp.w_gate").data)
            u = mm(xn, model.p(f"layers.{li}.mlp.w_in").data)
            h = (g * sigmoid_np(g)) * u
        else:
            u = mm(xn, model.p(f"layers.{li}.mlp.w_in").data)
            x3 = u * u * u
            h = 0.5 * u * (1.0 + np.tanh(T._GELU_C * (u + T._GELU_A * x3)))
        return mm(h, model.p(f"layers.{li}.mlp.w_out").data)


# ---------------------------------------------------------------------------
# Training kernels (tape ops, mirroring the inference kernels bit for bit)
# ---------------------------------------------------------------------------


def attn_delta_train(
    model: Model, li: int, x: Tensor, q_pos: np.ndarray
) -> Tensor:
    """Tape version of the full (all queries, all keys) attention delta."""
    cfg = model.cfg
    H, hd = cfg.n_heads, cfg.head_dim
    xn = T.rmsnorm(x, model.p(f"layers.{li}.attn_norm"), cfg.norm_eps)
    with flop_scope(f"L{li}.attn_proj"):
        q = T.matmul(xn, model.p(f"layers.{li}.attn.wq"))
        k = T.matmul(xn, model.p(f"layers.{li}.attn.wk"))
        v = T.matmul(xn, model.p(f"layers.{li}.attn.wv"))
    lead = x.shape[:-1]
    perm = tuple(range(len(lead) - 1)) + (len(lead) - 1 + 1, len(lead) - 1, len(lead) + 1)

    def heads(t: Tensor) -> Tensor:
        t = T.reshape(t, lead + (H, hd))
        return T.transpose(t, perm)

    cos, sin = model.rope_cos[q_pos], model.rope_sin[q_pos]
    q = T.rope(heads(q), cos, sin)
    k = T.rope(heads(k), cos, sin)
    v = heads(v)
    kt_perm = tuple(range(len(lead) + 1)) + (len(lead) + 1,)
    kt = T.transpose(k, kt_perm[:-2] + (kt_perm[-1], kt_perm[-2]))
    with flop_scope(f"L{li}.attn_score"):
        scores = T.scale(T.matmul(q, kt), model.attn_scale)
    bias = causal_bias(np.asarray(q_pos), np.asarray(q_pos))
    scores = T.add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
    probs = T.softmax(scores, axis=-1)
    with flop_scope(f"L{li}.attn_value"):
        ctx = T.matmul(probs, v)
    ctx = T.transpose(ctx, perm)  # swap back H and L
    ctx = T.reshape(ctx, lead + (cfg.d_model,))
    with flop_scope(f"L{li}.attn_proj"):
        return T.matmul(ctx, model.p(f"layers.{li}.attn.wo"))


def mlp_delta_train(model: Model, li: int, rows: Tensor) -> Tensor:
    cfg = model.cfg
    xn = T.rmsnorm(rows, model.p(f"layers.{li}.mlp_norm"), cfg.norm_eps)
    with flop_scope(f"L{li}.mlp"):
        if cfg.mlp_act == "swiglu":
            g = T.matmul(xn, model.p(f"layers.{li}.mlp.w_gate"))
            u = T.matmul(xn, model.p(f"layers.{li}.mlp.w_in"))
            h = T.mul(T.silu(g), u)
        else:
            u = T.matmul(xn, model.p(f"layers.{li}.mlp.w_in"))
            h = T.gelu(u)
        return T.matmul(h, model.p(f"layers.{li}.mlp.w_out"))


def lm_head_train(model: Model, x: Tensor) -> Tensor:
    xn = T.rmsnorm(x, model.p("final_norm"), model.cfg.norm_eps)
    with flop_scope("lm_head"):
        return T.matmul(xn, model.p("lm_head"))


def lm_head_infer(model: Model, x: np.ndarray) -> np.ndarray:
    xn = rms_np(x, model.p("final_norm").data, model.cfg.norm_eps)
    with flop_scope("lm_head"):
        return mm(xn, model.p("lm_head").data)


# ---------------------------------------------------------------------------
# Spec surface: single-sequence sublayer ops and the dense forward
# ---------------------------------------------------------------------------


def attention_layer(
    model: Model, li: int, x: np.ndarray, cache: KVCache | None = None
) -> np.ndarray:
    """One attention sublayer (with residual) on a single sequence [L, d]."""
    if x.ndim != 2 or x.shape[1] != model.cfg.d_model:
        raise ShapeError(f"expected [L, {model.cfg.d_model}] input, got {x.shape}")
    start = cache.layer(li).length if cache is not None else 0
    pos = np.arange(start, start + x.shape[0])
    layer_cache = cache.layer(li) if cache is not None else None
    delta = attn_delta_infer(
        model, li, x, pos, cache=layer_cache, write_cache=cache is not None
    )
    return x + delta


def mlp_layer(model: Model, li: int, x: np.ndarray) -> np.ndarray:
    """One MLP sublayer (with residual) on a single sequence [L, d]."""
    return x + mlp_delta_infer(model, li, x)


def forward_dense(model: Model, tokens, cache: KVCache | None = None) -> np.ndarray:
    """Full dense forward over one token sequence; returns [L, vocab] logits.

    With a cache the call appends exactly len(tokens) positions (one per call
    in single-token generation mode) and attends over everything stored so
    far.
    """
    from .routing import infer_forward_cached  # local import avoids a cycle

    return infer_forward_cached(model, np.asarray(tokens, dtype=np.int64), cache)


def embed_tokens(model: Model, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.cfg.vocab_size):
        raise IndexError(
            f"token id out of range [0, {model.cfg.vocab_size}): "
            f"min={int(tokens.min())} max={int(tokens.max())}"
        )
    return model.p("tok_emb").data[tokens].copy()
