"""In-batch sampled-softmax loss with the full debiasing stack.

Per query row the candidate set is the batch's positive items (column j
holds item j's embedding) plus, optionally, a FIFO cache of item
embeddings snapshotted from earlier batches. Logits are dot products over
temperature, minus log of the item's sampling probability when the logQ
correction is on. Accidental hits — candidates that equal a row's positive
but sit in another column — are excluded from that row's normalizer
entirely rather than given a large negative constant, which keeps the
exclusion exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FrequencyTable:
    """Smoothed empirical sampling probabilities over store indices.

    prob(i) = (counts[i] + k) / (total + k * n_items) with add-k smoothing,
    so probabilities are strictly inside (0, 1) even before any updates.
    """

    counts: np.ndarray  # int64, one slot per store index
    total: int = 0
    smoothing: float = 1.0

    @classmethod
    def zeros(cls, n_items: int, smoothing: float = 1.0) -> "FrequencyTable":
        if n_items < 1:
            raise ValueError(f"n_items must be >= 1, got {n_items}")
        if smoothing <= 0:
            raise ValueError(f"smoothing must be > 0, got {smoothing}")
        return cls(counts=np.zeros(n_items, dtype=np.int64), total=0, smoothing=smoothing)

    @property
    def n_items(self) -> int:
        return self.counts.shape[0]

    def prob(self, items) -> np.ndarray:
        idx = np.asarray(items, dtype=np.int64)
        denom = self.total + self.smoothing * self.n_items
        return (self.counts[idx] + self.smoothing) / denom

    def log_prob(self, items) -> np.ndarray:
        return np.log(self.prob(items))


def freq_update(freq: FrequencyTable, items) -> None:
    idx = np.asarray(items, dtype=np.int64)
    if idx.size == 0:
        return
    if idx.min() < 0 or idx.max() >= freq.n_items:
        raise IndexError(f"item index out of range for {freq.n_items} items")
    np.add.at(freq.counts, idx, 1)
    freq.total += int(idx.size)


class NegativeCache:
    """FIFO ring of (store index, detached embedding) pairs.

    Embeddings are copied on push and never touched again, so later table
    updates cannot leak into cached negatives.
    """

    def __init__(self, capacity: int = 6144):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._embs: np.ndarray | None = None  # allocated on first push
        self._start = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, ids, embs) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        embs = np.asarray(embs, dtype=np.float64)
        if ids.size == 0:
            return
        if embs.ndim != 2 or embs.shape[0] != ids.size:
            raise ValueError(f"{ids.size} ids but embedding block of shape {embs.shape}")
        if self._embs is None:
            self._embs = np.zeros((self.capacity, embs.shape[1]), dtype=np.float64)
        elif embs.shape[1] != self._embs.shape[1]:
            raise ValueError(f"embedding dim {embs.shape[1]} != cache dim {self._embs.shape[1]}")
        if ids.size > self.capacity:  # only the newest entries can survive
            ids = ids[-self.capacity :]
            embs = embs[-self.capacity :]
        n = ids.size
        slots = (self._start + self._size + np.arange(n)) % self.capacity
        self._ids[slots] = ids
        self._embs[slots] = embs  # copies into the ring; nothing aliases the caller
        overflow = self._size + n - self.capacity
        if overflow > 0:
            self._size = self.capacity
            self._start = (self._start + overflow) % self.capacity
        else:
            self._size += n

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """(ids, embeddings) in FIFO order, oldest first, as copies."""
        if self._size == 0:
            dim = 0 if self._embs is None else self._embs.shape[1]
            return np.empty(0, dtype=np.int64), np.empty((0, dim), dtype=np.float64)
        order = (self._start + np.arange(self._size)) % self.capacity
        return self._ids[order].copy(), self._embs[order].copy()

    def _views(self) -> tuple[np.ndarray, np.ndarray]:
        """Current entries as read-only views in storage (not FIFO) order.

        The softmax normalizer does not care about candidate order, so the
        loss reads these without the gather+copy that snapshot() pays for.
        """
        if self._size == 0:
            dim = 0 if self._embs is None else self._embs.shape[1]
            return np.empty(0, dtype=np.int64), np.empty((0, dim), dtype=np.float64)
        return self._ids[: self._size], self._embs[: self._size]

    def entries(self) -> list[tuple[int, np.ndarray]]:
        ids, embs = self.snapshot()
        return [(int(i), e) for i, e in zip(ids, embs)]

    def copy(self) -> "NegativeCache":
        dup = NegativeCache(self.capacity)
        dup._ids = self._ids.copy()
        dup._embs = None if self._embs is None else self._embs.copy()
        dup._start = self._start
        dup._size = self._size
        return dup


def cache_push(cache: NegativeCache, ids, embs) -> None:
    cache.push(ids, embs)


def accidental_hit_mask(positives, candidates) -> np.ndarray:
    """(B, C) boolean mask, True where a candidate must be excluded.

    Candidate column j is excluded for row i iff candidates[j] equals
    positives[i] and j is not row i's own positive column. Candidates are
    assumed to start with the batch's positives in order (cache columns
    follow), so the designated positive column for row i is i.
    """
    pos = np.asarray(positives, dtype=np.int64)
    cand = np.asarray(candidates, dtype=np.int64)
    mask = pos[:, None] == cand[None, :]
    b = min(pos.size, cand.size)
    diag = np.arange(b)
    mask[diag, diag] = False
    return mask


@dataclass
class LossOutput:
    loss: float
    grad_query: np.ndarray  # (B, dim)
    grad_item: np.ndarray  # (B, dim), in-batch positives only


def inbatch_softmax_loss(
    Q: np.ndarray,
    V: np.ndarray,
    positives,
    cache: NegativeCache | None = None,
    freq: FrequencyTable | None = None,
    temperature: float = 1.0,
    use_logq: bool = True,
    use_cache: bool = True,
    use_mask: bool = True,
) -> LossOutput:
    """Cross-entropy over in-batch (plus cached) candidates, with gradients.

    Returns the mean loss, dLoss/dQ, and dLoss/dV. Cached candidates act as
    extra negatives but receive no gradient. When ``use_cache`` is set the
    batch's (id, embedding) pairs are pushed into the cache afterwards, so
    the call mutates ``cache``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    B = Q.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if Q.ndim != 2 or V.shape != Q.shape:
        raise ValueError(f"Q {Q.shape} and V {V.shape} must be matching (B, dim) matrices")
    if pos.shape != (B,):
        raise ValueError(f"expected {B} positive ids, got shape {pos.shape}")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(V))):
        raise ValueError("non-finite input embeddings")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if use_logq and freq is None:
        raise ValueError("use_logq requires a frequency table")

    if use_cache and cache is not None and len(cache) > 0:
        cache_ids, cache_embs = cache._views()
        cand_ids = np.concatenate([pos, cache_ids])
        cand_embs = np.concatenate([V, cache_embs], axis=0)
    else:
        cand_ids = pos
        cand_embs = V

    logits = (Q / temperature) @ cand_embs.T  # scale the small factor, not the logits
    if use_logq:
        logits -= freq.log_prob(cand_ids)[None, :]

    diag = np.arange(B)
    pos_logits = logits[diag, diag].copy()

    if use_mask:
        # Masked cells are dropped from the normalizer, not floored: after
        # the max subtraction their exp contribution is exactly zero.
        logits[accidental_hit_mask(pos, cand_ids)] = -np.inf

    row_max = logits.max(axis=1)  # the positive column is never masked
    logits -= row_max[:, None]
    # gaps beyond exp's normal range would produce subnormals (slow, and
    # ~1e-308 so far below any tolerance); drop them to exact zeros instead
    logits[logits < -708.0] = -np.inf
    sigma = np.exp(logits, out=logits)
    denom = sigma.sum(axis=1)
    loss = float(np.mean(row_max + np.log(denom) - pos_logits))

    sigma /= denom[:, None]  # masked cells are exactly 0
    # delta = sigma - onehot(positive column); the onehot terms reduce to
    # the raw V and Q blocks, so delta is never materialized
    scale = 1.0 / (B * temperature)
    grad_query = scale * (sigma @ cand_embs - V)
    grad_item = scale * (sigma[:, :B].T @ Q - Q)

    if use_cache and cache is not None:
        cache.push(pos, V)

    return LossOutput(loss=loss, grad_query=grad_query, grad_item=grad_item)
