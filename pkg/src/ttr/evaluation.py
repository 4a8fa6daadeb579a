"""Exact top-k retrieval over the full item table and ranking metrics.

Retrieval is brute force: score every item by dot product and take the k
best, ties broken by ascending item index so results are deterministic.
Metrics use binary relevance (validation interactions are implicit
feedback) and average uniformly over evaluated users.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_model import BagOfStores, InteractionRecord, Vocabulary
from .towers import TwoTowerModel, Variant, parameter_count, query_forward_batch

DEFAULT_KS = (5, 20, 100, 200, 300, 400, 500)


@dataclass
class MetricsReport:
    hit_rate: dict[int, float]
    ndcg: dict[int, float]
    map: dict[int, float]
    n_users: int
    n_skipped_no_features: int = 0
    n_skipped_no_relevant: int = 0
    parameter_count: int = 0
    wall_clock: float = 0.0
    averaged_over: str = "users"
    variant: str = ""

    def to_json(self) -> str:
        payload = {
            "variant": self.variant,
            "hit_rate": {str(k): v for k, v in sorted(self.hit_rate.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "map": {str(k): v for k, v in sorted(self.map.items())},
            "n_users": self.n_users,
            "n_skipped_no_features": self.n_skipped_no_features,
            "n_skipped_no_relevant": self.n_skipped_no_relevant,
            "parameter_count": self.parameter_count,
            "wall_clock": self.wall_clock,
            "averaged_over": self.averaged_over,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        return cls(
            hit_rate={int(k): v for k, v in obj["hit_rate"].items()},
            ndcg={int(k): v for k, v in obj["ndcg"].items()},
            map={int(k): v for k, v in obj["map"].items()},
            n_users=obj["n_users"],
            n_skipped_no_features=obj.get("n_skipped_no_features", 0),
            n_skipped_no_relevant=obj.get("n_skipped_no_relevant", 0),
            parameter_count=obj.get("parameter_count", 0),
            wall_clock=obj.get("wall_clock", 0.0),
            averaged_over=obj.get("averaged_over", "users"),
            variant=obj.get("variant", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def csv_row(self) -> tuple[list[str], list[str]]:
        """(header, row) mirroring the cross-run comparison layout."""
        ks = sorted(self.hit_rate)
        header = ["model"] + [f"hit_rate_at_{k}" for k in ks] + ["parameter_count"]
        row = [self.variant] + [f"{self.hit_rate[k]:.6f}" for k in ks] + [str(self.parameter_count)]
        return header, row


def top_k(qe: np.ndarray, item_table: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest dot products, descending; ties by ascending index."""
    item_table = np.asarray(item_table, dtype=np.float64)
    n_items = item_table.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n_items:
        raise ValueError(f"k={k} exceeds the {n_items}-item catalog")
    scores = item_table @ np.asarray(qe, dtype=np.float64)
    # stable sort on negated scores keeps ascending index order among ties
    return np.argsort(-scores, kind="stable")[:k]


def top_k_batch(Q: np.ndarray, item_table: np.ndarray, k: int) -> np.ndarray:
    """Row-wise top_k for a (n, dim) query matrix; returns (n, k) indices."""
    item_table = np.asarray(item_table, dtype=np.float64)
    n_items = item_table.shape[0]
    if k < 1 or k > n_items:
        raise ValueError(f"k={k} out of range for {n_items} items")
    scores = np.asarray(Q, dtype=np.float64) @ item_table.T
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _as_relevant_set(relevant) -> set[int]:
    rel = set(int(x) for x in relevant)
    if not rel:
        raise ValueError("relevant set must be non-empty")
    return rel


def hit_rate_at_k(recommended: Sequence[int], relevant, k: int) -> float:
    """Fraction of the relevant items appearing in the first k recommendations."""
    rel = _as_relevant_set(relevant)
    if len(recommended) < k:
        raise ValueError(f"need at least {k} recommendations, got {len(recommended)}")
    hits = sum(1 for item in recommended[:k] if int(item) in rel)
    return hits / len(rel)


def ndcg_at_k(recommended: Sequence[int], relevant, k: int) -> float:
    rel = _as_relevant_set(relevant)
    if len(recommended) < k:
        raise ValueError(f"need at least {k} recommendations, got {len(recommended)}")
    dcg = sum(
        1.0 / math.log2(p + 1)
        for p, item in enumerate(recommended[:k], start=1)
        if int(item) in rel
    )
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, len(rel)) + 1))
    return dcg / idcg


def map_at_k(recommended: Sequence[int], relevant, k: int) -> float:
    """Average precision at k: mean of precision@p over hit positions p."""
    rel = _as_relevant_set(relevant)
    if len(recommended) < k:
        raise ValueError(f"need at least {k} recommendations, got {len(recommended)}")
    hits = 0
    precision_sum = 0.0
    for p, item in enumerate(recommended[:k], start=1):
        if int(item) in rel:
            hits += 1
            precision_sum += hits / p
    return precision_sum / min(k, len(rel))


def _metric_rows(top: np.ndarray, relevant_sets: list[np.ndarray], ks: Sequence[int]):
    """Per-user metric triples from precomputed top rows; one pass per user."""
    n = top.shape[0]
    ks = list(ks)
    hr = np.zeros((n, len(ks)))
    nd = np.zeros((n, len(ks)))
    mp = np.zeros((n, len(ks)))
    max_k = top.shape[1]
    discounts = 1.0 / np.log2(np.arange(2, max_k + 2))
    for i in range(n):
        rel = relevant_sets[i]
        hit_mask = np.isin(top[i], rel, assume_unique=False)
        hit_pos = np.nonzero(hit_mask)[0]  # 0-indexed ranks of hits
        cum_hits = np.cumsum(hit_mask)
        n_rel = rel.size
        for j, k in enumerate(ks):
            in_k = hit_pos[hit_pos < k]
            hr[i, j] = in_k.size / n_rel
            m = min(k, n_rel)
            idcg = discounts[:m].sum()
            nd[i, j] = discounts[in_k].sum() / idcg
            if in_k.size:
                mp[i, j] = (cum_hits[in_k] / (in_k + 1)).sum() / m
    return hr, nd, mp


def evaluate(
    model: TwoTowerModel,
    validation: Sequence[InteractionRecord],
    features: Mapping[int, BagOfStores],
    user_vocab: Vocabulary,
    store_vocab: Vocabulary,
    ks: Sequence[int] = DEFAULT_KS,
) -> MetricsReport:
    """Retrieve top-k for every evaluable validation user and score it.

    A user's relevant set is the distinct stores they touched in the
    validation window. Users absent from the training vocabulary/feature
    map, or whose validation stores are all unknown, are skipped and
    counted. Metrics are averaged uniformly over the evaluated users.
    """
    t0 = time.perf_counter()
    ks = sorted(set(int(k) for k in ks))
    if not ks:
        raise ValueError("ks must be non-empty")
    n_items = model.n_items
    if ks[-1] > n_items:
        raise ValueError(f"k={ks[-1]} exceeds the {n_items}-item catalog")

    relevant_by_user: dict[int, set[int]] = {}
    skipped_no_features = set()
    skipped_no_relevant = set()
    for r in validation:
        if r.user_id not in user_vocab:
            skipped_no_features.add(r.user_id)
            continue
        u = user_vocab.index(r.user_id)
        if model.config.variant is not Variant.DMF and u not in features:
            skipped_no_features.add(r.user_id)
            continue
        if r.store_id in store_vocab:
            relevant_by_user.setdefault(u, set()).add(store_vocab.index(r.store_id))
        else:
            relevant_by_user.setdefault(u, set())

    users = []
    relevant_sets = []
    for u in sorted(relevant_by_user):
        rel = relevant_by_user[u]
        if not rel:
            skipped_no_relevant.add(u)
            continue
        users.append(u)
        relevant_sets.append(np.fromiter(sorted(rel), dtype=np.int64))

    if skipped_no_features or skipped_no_relevant:
        warnings.warn(
            f"evaluation skipped {len(skipped_no_features)} users without features "
            f"and {len(skipped_no_relevant)} users without known relevant items",
            stacklevel=2,
        )
    if not users:
        raise ValueError("no evaluable users in the validation set")

    if model.config.variant is Variant.DMF:
        queries = users
    else:
        queries = [features[u] for u in users]

    max_k = ks[-1]
    item_matrix = model.item_table.weights

    def run_chunk(bounds):
        lo, hi = bounds
        Q = query_forward_batch(model, queries[lo:hi])
        top = top_k_batch(Q, item_matrix, max_k)
        return _metric_rows(top, relevant_sets[lo:hi], ks)

    workers = max(1, int(os.environ.get("TTR_THREADS", "1")))
    chunk = 2048
    bounds = [(lo, min(lo + chunk, len(users))) for lo in range(0, len(users), chunk)]
    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, bounds))  # in-order merge keeps determinism
    else:
        parts = [run_chunk(b) for b in bounds]

    hr = np.concatenate([p[0] for p in parts]).mean(axis=0)
    nd = np.concatenate([p[1] for p in parts]).mean(axis=0)
    mp = np.concatenate([p[2] for p in parts]).mean(axis=0)

    return MetricsReport(
        hit_rate={k: float(hr[j]) for j, k in enumerate(ks)},
        ndcg={k: float(nd[j]) for j, k in enumerate(ks)},
        map={k: float(mp[j]) for j, k in enumerate(ks)},
        n_users=len(users),
        n_skipped_no_features=len(skipped_no_features),
        n_skipped_no_relevant=len(skipped_no_relevant),
        parameter_count=parameter_count(model),
        wall_clock=time.perf_counter() - t0,
        variant=model.config.variant.value,
    )
