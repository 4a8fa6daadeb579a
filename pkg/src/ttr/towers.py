"""The three model variants and their forward passes.

DMF embeds raw user IDs; the BOW variants replace the user embedding with
a pooled bag of previously ordered stores. BOW_SHARED keeps a single
physical store table referenced from both towers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data_model import BagOfStores
from .embedding import (
    EmbeddingTable,
    lookup,
    new_table,
    pooled_lookup,
    pooled_lookup_batch,
)


class Variant(str, Enum):
    DMF = "dmf"
    BOW = "bow"
    BOW_SHARED = "bow_shared"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        normalized = name.strip().lower().replace("-", "_")
        try:
            return cls(normalized)
        except ValueError:
            raise ValueError(f"unknown variant: {name!r} (expected dmf, bow, or bow-shared)") from None


@dataclass
class ModelConfig:
    variant: Variant = Variant.BOW
    dim: int = 32
    temperature: float = 0.1
    pooling: str = "mean"
    seed: int = 0
    init_scale: float = 0.05

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = Variant.parse(self.variant)
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.pooling not in ("mean", "sum"):
            raise ValueError(f"pooling must be 'mean' or 'sum', got {self.pooling!r}")


@dataclass
class TwoTowerModel:
    config: ModelConfig
    item_table: EmbeddingTable
    user_table: EmbeddingTable | None = None  # DMF only
    query_store_table: EmbeddingTable | None = None  # BOW variants
    n_users: int = 0

    @property
    def n_items(self) -> int:
        return self.item_table.rows


def build_model(config: ModelConfig, n_users: int, n_stores: int) -> TwoTowerModel:
    """Fresh model with per-tower tables derived deterministically from config.seed."""
    if n_stores < 1:
        raise ValueError(f"n_stores must be >= 1, got {n_stores}")
    if config.variant is Variant.DMF:
        if n_users < 1:
            raise ValueError(f"n_users must be >= 1 for DMF, got {n_users}")
        return TwoTowerModel(
            config=config,
            user_table=new_table(n_users, config.dim, config.seed, config.init_scale),
            item_table=new_table(n_stores, config.dim, config.seed + 1, config.init_scale),
            n_users=n_users,
        )
    if config.variant is Variant.BOW:
        return TwoTowerModel(
            config=config,
            query_store_table=new_table(n_stores, config.dim, config.seed, config.init_scale),
            item_table=new_table(n_stores, config.dim, config.seed + 1, config.init_scale),
            n_users=n_users,
        )
    shared = new_table(n_stores, config.dim, config.seed, config.init_scale)
    return TwoTowerModel(config=config, query_store_table=shared, item_table=shared, n_users=n_users)


def query_forward(model: TwoTowerModel, q) -> np.ndarray:
    """Query-tower embedding: a user row (DMF) or a pooled bag (BOW variants)."""
    if model.config.variant is Variant.DMF:
        if isinstance(q, BagOfStores):
            raise TypeError("DMF takes a user index, not a bag")
        return lookup(model.user_table, int(q))
    if isinstance(q, (int, np.integer)):
        raise TypeError(f"{model.config.variant.value} takes a bag, not a user index")
    return pooled_lookup(model.query_store_table, q, model.config.pooling)


def query_forward_batch(model: TwoTowerModel, qs) -> np.ndarray:
    if model.config.variant is Variant.DMF:
        idx = np.asarray(qs, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= model.user_table.rows):
            raise IndexError("user index out of range")
        return model.user_table.weights[idx]  # fancy indexing copies
    return pooled_lookup_batch(model.query_store_table, qs, model.config.pooling)


def item_forward(model: TwoTowerModel, item: int) -> np.ndarray:
    return lookup(model.item_table, int(item))


def item_forward_batch(model: TwoTowerModel, items) -> np.ndarray:
    idx = np.asarray(items, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= model.item_table.rows):
        raise IndexError("item index out of range")
    return model.item_table.weights[idx]  # fancy indexing copies


def score(qe: np.ndarray, ve: np.ndarray) -> float:
    """Raw dot product; the training temperature is not applied at retrieval."""
    qe = np.asarray(qe, dtype=np.float64)
    ve = np.asarray(ve, dtype=np.float64)
    if qe.shape != ve.shape:
        raise ValueError(f"dimension mismatch: {qe.shape} vs {ve.shape}")
    return float(qe @ ve)


def parameter_count(model: TwoTowerModel) -> int:
    """Total weight entries; a table shared by both towers counts once."""
    count = model.item_table.rows * model.item_table.dim
    if model.user_table is not None:
        count += model.user_table.rows * model.user_table.dim
    if model.query_store_table is not None and model.query_store_table is not model.item_table:
        count += model.query_store_table.rows * model.query_store_table.dim
    return count


def parameter_count_formula(variant: Variant, n_users: int, n_stores: int, dim: int) -> int:
    """Closed form of parameter_count: DMF (U+S)d, BOW 2Sd, BOW_SHARED Sd."""
    if variant is Variant.DMF:
        return (n_users + n_stores) * dim
    if variant is Variant.BOW:
        return 2 * n_stores * dim
    return n_stores * dim
