"""Dense embedding tables with per-parameter AdaGrad state.

Tables are plain objects; holding the same table object in two places is
how layer sharing works — an update through one reference is visible
through every other. Training math is float64; the checkpoint format
stores float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"TTEB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIQQI")  # magic, version, rows, dim, flags


class FormatError(ValueError):
    """Checkpoint bytes do not match the expected layout."""


@dataclass
class EmbeddingTable:
    weights: np.ndarray  # (rows, dim) float64
    accumulators: np.ndarray  # (rows, dim) float64, >= 0, non-decreasing
    rng_seed: int

    @property
    def rows(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def new_table(rows: int, dim: int, seed: int, init_scale: float = 0.05) -> EmbeddingTable:
    """Table with uniform(-init_scale, init_scale) weights and zero AdaGrad state."""
    if rows < 1:
        raise ValueError(f"rows must be >= 1, got {rows}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-init_scale, init_scale, size=(rows, dim))
    return EmbeddingTable(
        weights=weights,
        accumulators=np.zeros((rows, dim), dtype=np.float64),
        rng_seed=seed,
    )


def _check_index(table: EmbeddingTable, idx: int) -> None:
    if not 0 <= idx < table.rows:
        raise IndexError(f"row {idx} out of range for table with {table.rows} rows")


def _bag_indices(bag) -> Sequence[int]:
    return bag.store_indices if hasattr(bag, "store_indices") else bag


def lookup(table: EmbeddingTable, idx: int) -> np.ndarray:
    """Copy of row ``idx``."""
    _check_index(table, idx)
    return table.weights[idx].copy()


def pooled_lookup(table: EmbeddingTable, bag, mode: str = "mean") -> np.ndarray:
    """Pool the bag's rows into one vector; an empty bag pools to zeros."""
    indices = _bag_indices(bag)
    if len(indices) == 0:
        return np.zeros(table.dim, dtype=np.float64)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= table.rows:
        raise IndexError(f"bag index out of range for table with {table.rows} rows")
    if mode == "mean":
        return table.weights[idx].mean(axis=0)
    if mode == "sum":
        return table.weights[idx].sum(axis=0)
    raise ValueError(f"unknown pooling mode: {mode!r}")


def pooled_lookup_batch(table: EmbeddingTable, bags: Sequence, mode: str = "mean") -> np.ndarray:
    """Vectorized ``pooled_lookup`` over a batch of bags."""
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown pooling mode: {mode!r}")
    arrays = [np.asarray(_bag_indices(b), dtype=np.int64) for b in bags]
    lens = np.array([a.size for a in arrays], dtype=np.int64)
    out = np.zeros((len(arrays), table.dim), dtype=np.float64)
    nonempty = np.nonzero(lens)[0]
    if nonempty.size == 0:
        return out
    flat = np.concatenate([arrays[i] for i in nonempty])
    if flat.min() < 0 or flat.max() >= table.rows:
        raise IndexError(f"bag index out of range for table with {table.rows} rows")
    seg_lens = lens[nonempty]
    starts = np.zeros(nonempty.size, dtype=np.int64)
    starts[1:] = np.cumsum(seg_lens)[:-1]
    sums = np.add.reduceat(table.weights[flat], starts, axis=0)
    if mode == "mean":
        sums /= seg_lens[:, None]
    out[nonempty] = sums
    return out


def pooled_backward(table: EmbeddingTable, bag, upstream: np.ndarray, mode: str = "mean") -> list[tuple[int, np.ndarray]]:
    """Gradient of pooled_lookup w.r.t. the touched rows.

    Mean pooling: row i with multiplicity c_i in a bag of length n gets
    (c_i / n) * upstream. Sum pooling drops the 1/n.
    """
    indices = _bag_indices(bag)
    if len(indices) == 0:
        return []
    idx = np.asarray(indices, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= table.rows:
        raise IndexError(f"bag index out of range for table with {table.rows} rows")
    upstream = np.asarray(upstream, dtype=np.float64)
    scale = 1.0 / idx.size if mode == "mean" else 1.0
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown pooling mode: {mode!r}")
    rows, counts = np.unique(idx, return_counts=True)
    return [(int(r), counts[i] * scale * upstream) for i, r in enumerate(rows)]


def pooled_backward_rows(bags: Sequence, upstream: np.ndarray, mode: str = "mean") -> tuple[np.ndarray, np.ndarray]:
    """Flattened (rows, per-row gradients) for a batch of bags.

    Row duplicates are kept; ``apply_gradients`` sums them before stepping.
    """
    if mode not in ("mean", "sum"):
        raise ValueError(f"unknown pooling mode: {mode!r}")
    arrays = [np.asarray(_bag_indices(b), dtype=np.int64) for b in bags]
    lens = np.array([a.size for a in arrays], dtype=np.int64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if lens.sum() == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, upstream.shape[1]), dtype=np.float64)
    per_example = upstream.copy()
    if mode == "mean":
        nz = lens > 0
        per_example[nz] /= lens[nz, None]
    rows = np.concatenate([a for a in arrays if a.size])
    grads = np.repeat(per_example, lens, axis=0)
    return rows, grads


def adagrad_update(table: EmbeddingTable, idx: int, grad: np.ndarray, lr: float, eps: float = 1e-10) -> None:
    """acc += g*g; w -= lr * g / (sqrt(acc) + eps), with the updated acc."""
    _check_index(table, idx)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (table.dim,):
        raise ValueError(f"gradient shape {grad.shape} != ({table.dim},)")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    table.accumulators[idx] += grad * grad
    table.weights[idx] -= lr * grad / (np.sqrt(table.accumulators[idx]) + eps)


def apply_gradients(
    table: EmbeddingTable,
    rows: np.ndarray,
    grads: np.ndarray,
    lr: float,
    eps: float = 1e-10,
) -> None:
    """One AdaGrad step per distinct row, duplicates summed first.

    Summing before the step keeps the result independent of the order the
    (row, gradient) pairs arrive in.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != (rows.size, table.dim):
        raise ValueError(f"gradient shape {grads.shape} != ({rows.size}, {table.dim})")
    if rows.min() < 0 or rows.max() >= table.rows:
        raise IndexError(f"row index out of range for table with {table.rows} rows")
    if not np.all(np.isfinite(grads)):
        raise ValueError("non-finite gradient")
    unique, inverse = np.unique(rows, return_inverse=True)
    summed = np.zeros((unique.size, table.dim), dtype=np.float64)
    np.add.at(summed, inverse, grads)
    table.accumulators[unique] += summed * summed
    table.weights[unique] -= lr * summed / (np.sqrt(table.accumulators[unique]) + eps)


def write_table_block(fh: BinaryIO, table: EmbeddingTable, flags: int = 0) -> None:
    """Append one table block: header, float32 LE weights, float32 LE accumulators."""
    fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, table.rows, table.dim, flags))
    fh.write(table.weights.astype("<f4").tobytes(order="C"))
    fh.write(table.accumulators.astype("<f4").tobytes(order="C"))


def read_table_block(fh: BinaryIO) -> EmbeddingTable:
    """Read one table block written by ``write_table_block``.

    Loaded values are upcast to float64; the original creation seed is not
    part of the block, so the restored table carries rng_seed = -1.
    """
    header = fh.read(_HEADER.size)
    if len(header) < _HEADER.size:
        raise FormatError("truncated table header")
    magic, version, rows, dim, _flags = _HEADER.unpack(header)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if rows < 1 or dim < 1:
        raise FormatError(f"bad shape ({rows}, {dim})")
    n_bytes = rows * dim * 4
    raw_w = fh.read(n_bytes)
    raw_a = fh.read(n_bytes)
    if len(raw_w) < n_bytes or len(raw_a) < n_bytes:
        raise FormatError("truncated table payload")
    weights = np.frombuffer(raw_w, dtype="<f4").reshape(rows, dim).astype(np.float64)
    accumulators = np.frombuffer(raw_a, dtype="<f4").reshape(rows, dim).astype(np.float64)
    return EmbeddingTable(weights=weights, accumulators=accumulators, rng_seed=-1)


def save_table(table: EmbeddingTable, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        write_table_block(fh, table)


def load_table(path: str | Path) -> EmbeddingTable:
    with Path(path).open("rb") as fh:
        table = read_table_block(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after table block")
    return table
