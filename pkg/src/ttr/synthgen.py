"""Synthetic interaction generator with preference clusters and Zipf popularity.

Stores are partitioned into clusters and weighted within each cluster by
rank^(-zipf_exponent). Each user has a home cluster; orders come from the
home cluster's popularity distribution with probability 1 - noise, else
uniformly from the whole catalog. Per-user RNG streams are derived from
(seed, user index), so generation order cannot change the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import SECONDS_PER_DAY, InteractionRecord


@dataclass
class SynthConfig:
    n_users: int = 20_000
    n_stores: int = 1_000
    n_clusters: int = 20
    zipf_exponent: float = 1.0
    days: int = 127
    orders_per_user_mean: float = 12.0
    user_sample_fraction: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_users, self.n_stores, self.n_clusters, self.days) < 1:
            raise ValueError("n_users, n_stores, n_clusters, and days must all be >= 1")
        if self.n_clusters > self.n_stores:
            raise ValueError(f"n_clusters={self.n_clusters} exceeds n_stores={self.n_stores}")
        if self.zipf_exponent < 0:
            raise ValueError(f"zipf_exponent must be >= 0, got {self.zipf_exponent}")
        if self.orders_per_user_mean <= 0:
            raise ValueError("orders_per_user_mean must be > 0")
        if not 0 < self.user_sample_fraction <= 1:
            raise ValueError(f"user_sample_fraction must be in (0, 1], got {self.user_sample_fraction}")
        if not 0 <= self.noise <= 1:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")


def cluster_assignments(cfg: SynthConfig) -> list[np.ndarray]:
    """Stores of each cluster, as contiguous blocks of the catalog."""
    return np.array_split(np.arange(cfg.n_stores), cfg.n_clusters)


def cluster_weights(cfg: SynthConfig) -> list[np.ndarray]:
    """Within-cluster sampling weights proportional to rank^(-zipf_exponent)."""
    weights = []
    for members in cluster_assignments(cfg):
        ranks = np.arange(1, members.size + 1, dtype=np.float64)
        w = ranks ** (-cfg.zipf_exponent)
        weights.append(w / w.sum())
    return weights


def generate(cfg: SynthConfig) -> list[InteractionRecord]:
    """Interaction records sorted by timestamp, fully determined by cfg.seed."""
    cfg.validate()
    master = np.random.default_rng(cfg.seed)
    clusters = cluster_assignments(cfg)
    weights = cluster_weights(cfg)

    home = master.integers(0, cfg.n_clusters, size=cfg.n_users)
    if cfg.user_sample_fraction < 1.0:
        n_keep = max(1, int(round(cfg.n_users * cfg.user_sample_fraction)))
        kept = np.sort(master.choice(cfg.n_users, size=n_keep, replace=False))
    else:
        kept = np.arange(cfg.n_users)

    horizon = cfg.days * SECONDS_PER_DAY
    records: list[InteractionRecord] = []
    for u in kept:
        rng = np.random.default_rng([cfg.seed, int(u)])
        n_orders = rng.poisson(cfg.orders_per_user_mean)
        if n_orders == 0:
            continue
        members = clusters[home[u]]
        stores = members[rng.choice(members.size, size=n_orders, p=weights[home[u]])]
        if cfg.noise > 0:
            off_cluster = rng.random(n_orders) < cfg.noise
            stores = np.where(off_cluster, rng.integers(0, cfg.n_stores, size=n_orders), stores)
        timestamps = rng.integers(0, horizon, size=n_orders)
        user_id = f"u{u}"
        records.extend(
            InteractionRecord(user_id, f"s{s}", int(t))
            for s, t in zip(stores, timestamps)
        )
    records.sort(key=lambda r: r.timestamp)  # stable: equal timestamps keep user order
    return records
