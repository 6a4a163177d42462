"""Byte-level corpus ingestion: fixed-length training windows with one-token
shifted targets, deterministic shuffling, and a synthetic text generator for
self-contained runs."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError

PAD = -1  # target positions with this id are excluded from the loss


@dataclass
class Dataset:
    inputs: np.ndarray  # [N, L] int64 token ids
    targets: np.ndarray  # [N, L] int64, PAD where no next token exists

    def __len__(self) -> int:
        return self.inputs.shape[0]


def tokenize_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def make_windows(tokens: np.ndarray, seq_len: int) -> Dataset:
    """Non-overlapping windows; inputs are L tokens, targets the next token at
    each position. Only the final window's last target can be padding; a
    trailing chunk shorter than seq_len is dropped."""
    n = tokens.shape[0] // seq_len
    if n == 0:
        raise DataError(f"corpus of {tokens.shape[0]} tokens is shorter than one {seq_len}-window")
    inputs = tokens[: n * seq_len].reshape(n, seq_len)
    shifted = np.full(n * seq_len, PAD, dtype=np.int64)
    avail = min(tokens.shape[0] - 1, n * seq_len)
    shifted[:avail] = tokens[1 : avail + 1]
    return Dataset(inputs.copy(), shifted.reshape(n, seq_len))


def ingest_corpus(
    path: str | os.PathLike,
    seq_len: int,
    seed: int = 0,
    max_windows: int | None = 5000,
) -> Dataset:
    """Read a UTF-8 text file into shuffled training windows (shuffle and the
    window cap are both deterministic in the seed)."""
    if not os.path.exists(path):
        raise DataError(f"corpus file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text:
        raise DataError(f"corpus file is empty: {path}")
    ds = make_windows(tokenize_text(text), seq_len)
    order = np.random.default_rng(seed).permutation(len(ds))
    if max_windows is not None:
        order = order[:max_windows]
    return Dataset(ds.inputs[order], ds.targets[order])


def split_dataset(ds: Dataset, val_fraction: float) -> tuple[Dataset, Dataset]:
    """Disjoint train/validation split (validation takes the tail)."""
    n_val = max(1, int(round(len(ds) * val_fraction)))
    if n_val >= len(ds):
        raise DataError(f"cannot hold out {n_val} of {len(ds)} windows for validation")
    cut = len(ds) - n_val
    return (
        Dataset(ds.inputs[:cut], ds.targets[:cut]),
        Dataset(ds.inputs[cut:], ds.targets[cut:]),
    )


def batch_iter(ds: Dataset, batch_size: int, steps: int, seed: int):
    """Yield `steps` (inputs, targets) batches, reshuffling every epoch with a
    seed-derived stream; short epoch tails are dropped so batches keep their
    shape."""
    if len(ds) < batch_size:
        raise DataError(f"dataset of {len(ds)} windows cannot fill a batch of {batch_size}")
    rng = np.random.default_rng(seed)
    produced = 0
    while produced < steps:
        order = rng.permutation(len(ds))
        for start in range(0, len(ds) - batch_size + 1, batch_size):
            if produced >= steps:
                return
            idx = order[start : start + batch_size]
            yield ds.inputs[idx], ds.targets[idx]
            produced += 1


_WORDS = [
    "stone", "river", "lantern", "quiet", "amber", "forest", "signal", "harbor",
    "window", "copper", "meadow", "cipher", "garden", "ember", "hollow", "north",
    "falls", "turns", "glows", "waits", "drifts", "hums", "rises", "fades",
]
_OPS = ["+", "-", "*"]


def synthetic_corpus(n_chars: int, seed: int = 0) -> str:
    """Deterministic toy text: short subject-verb sentences mixed with tiny
    arithmetic lines, enough structure for a byte-level model to learn."""
    rng = np.random.default_rng(seed)
    parts: list[str] = []
    size = 0
    while size < n_chars:
        if rng.random() < 0.2:
            a, b = rng.integers(0, 10, size=2)
            op = _OPS[rng.integers(0, len(_OPS))]
            res = {"+": a + b, "-": a - b, "*": a * b}[op]
            sent = f"{a} {op} {b} = {res}.\n"
        else:
            sub = _WORDS[rng.integers(0, 16)]
            verb = _WORDS[16 + rng.integers(0, 8)]
            obj = _WORDS[rng.integers(0, 16)]
            sent = f"the {sub} {verb} by the {obj}. "
        parts.append(sent)
        size += len(sent)
    return "".join(parts)[:n_chars]
