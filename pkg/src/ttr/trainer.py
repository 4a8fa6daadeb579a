"""Mini-batch training loop, convergence tracking, and model checkpoints.

The loop is strictly sequential: the negative cache and the shared-table
variant make update order observable, so determinism comes from a seeded
shuffle and single-threaded execution. Item sampling probabilities for the
logQ correction are rebuilt from the training positives in a pre-pass
before every epoch, so they are constant within an epoch.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_model import BagOfStores, SplitDataset, Vocabulary, build_per_example_bags
from .embedding import (
    FormatError,
    apply_gradients,
    pooled_backward_rows,
    read_table_block,
    write_table_block,
)
from .evaluation import top_k_batch
from .loss import FrequencyTable, NegativeCache, freq_update, inbatch_softmax_loss
from .towers import ModelConfig, TwoTowerModel, Variant, query_forward_batch

CHECKPOINT_HEADER = "ttr-model v1"


class VocabularyMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8192  # production-scale default; desk-scale runs use 256
    epochs: int = 10
    lr: float = 0.02
    cache_capacity: int = 6144
    eval_every_steps: int = 50
    eval_sample_users: int = 512
    eval_ks: tuple[int, ...] = (20, 100)
    seed: int = 0
    use_logq: bool = True
    use_cache: bool = True
    use_mask: bool = True
    freq_smoothing: float = 1.0
    adagrad_eps: float = 1e-10
    # "global" trains every pair on the user's evaluation-time feature bag;
    # "per_example" uses only the strictly earlier orders (no label in the
    # bag), which generalizes better at sharp temperatures but trains slower.
    bag_anchor: str = "global"
    window_days: int = 120
    max_bag_len: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.bag_anchor not in ("per_example", "global"):
            raise ValueError(f"bag_anchor must be 'per_example' or 'global', got {self.bag_anchor!r}")


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class EvalRecord:
    step: int
    hit_rate: dict[int, float]


@dataclass
class TrainingLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]


def _train_pairs(data: SplitDataset, user_vocab: Vocabulary, store_vocab: Vocabulary):
    users = np.empty(len(data.train), dtype=np.int64)
    items = np.empty(len(data.train), dtype=np.int64)
    for i, r in enumerate(data.train):
        try:
            users[i] = user_vocab.index(r.user_id)
            items[i] = store_vocab.index(r.store_id)
        except KeyError as exc:
            raise VocabularyMismatchError(f"training record references unknown token {exc}") from None
    return users, items


def _check_model_vocab(model: TwoTowerModel, user_vocab: Vocabulary, store_vocab: Vocabulary):
    if model.n_items != store_vocab.n:
        raise VocabularyMismatchError(
            f"model has {model.n_items} item rows but the store vocabulary has {store_vocab.n}"
        )
    if model.config.variant is Variant.DMF and model.user_table.rows != user_vocab.n:
        raise VocabularyMismatchError(
            f"model has {model.user_table.rows} user rows but the user vocabulary has {user_vocab.n}"
        )


class _ValidationProbe:
    """Hit rate on a fixed subsample of validation users, for the training log."""

    def __init__(self, model, data, features, user_vocab, store_vocab, cfg):
        relevant: dict[int, set[int]] = {}
        for r in data.validation:
            if r.user_id not in user_vocab or r.store_id not in store_vocab:
                continue
            u = user_vocab.index(r.user_id)
            if model.config.variant is not Variant.DMF and u not in features:
                continue
            relevant.setdefault(u, set()).add(store_vocab.index(r.store_id))
        users = sorted(relevant)
        rng = np.random.default_rng(cfg.seed + 1)
        if len(users) > cfg.eval_sample_users:
            users = sorted(rng.choice(users, size=cfg.eval_sample_users, replace=False))
        self.users = users
        ks = tuple(k for k in sorted(set(cfg.eval_ks)) if 1 <= k <= model.n_items)
        self.ks = ks if ks else (model.n_items,)
        self.rel_sizes = np.array([len(relevant[u]) for u in users], dtype=np.float64)
        self.relevant = [np.fromiter(sorted(relevant[u]), dtype=np.int64) for u in users]
        if model.config.variant is Variant.DMF:
            self.queries = users
        else:
            self.queries = [features[u] for u in users]

    def hit_rates(self, model) -> dict[int, float]:
        if not self.users:
            return {k: 0.0 for k in self.ks}
        Q = query_forward_batch(model, self.queries)
        top = top_k_batch(Q, model.item_table.weights, max(self.ks))
        out = {}
        for k in self.ks:
            hits = np.array(
                [np.isin(top[i, :k], self.relevant[i]).sum() for i in range(len(self.users))],
                dtype=np.float64,
            )
            out[k] = float(np.mean(hits / self.rel_sizes))
        return out


def train(
    model: TwoTowerModel,
    data: SplitDataset,
    features: Mapping[int, BagOfStores],
    cfg: TrainConfig,
    user_vocab: Vocabulary,
    store_vocab: Vocabulary,
) -> tuple[TwoTowerModel, TrainingLog]:
    """Train in place and return (model, log). Deterministic for a fixed seed."""
    _check_model_vocab(model, user_vocab, store_vocab)
    pair_users, pair_items = _train_pairs(data, user_vocab, store_vocab)
    if pair_users.size == 0:
        raise ValueError("no training pairs")

    is_dmf = model.config.variant is Variant.DMF
    shared = model.query_store_table is model.item_table
    if not is_dmf:
        if cfg.bag_anchor == "per_example":
            example_bags = build_per_example_bags(
                data.train, user_vocab, store_vocab, cfg.window_days, cfg.max_bag_len
            )
            pair_bags = [np.asarray(b.store_indices, dtype=np.int64) for b in example_bags]
        else:
            user_bags = {}
            for u in np.unique(pair_users):
                if int(u) not in features:
                    raise VocabularyMismatchError(f"no bag feature for user index {int(u)}")
                user_bags[int(u)] = np.asarray(features[int(u)].store_indices, dtype=np.int64)
            pair_bags = [user_bags[int(u)] for u in pair_users]

    probe = _ValidationProbe(model, data, features, user_vocab, store_vocab, cfg)
    cache = NegativeCache(cfg.cache_capacity)
    rng = np.random.default_rng(cfg.seed)
    log = TrainingLog()
    temperature = model.config.temperature
    pooling = model.config.pooling
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        freq = FrequencyTable.zeros(store_vocab.n, cfg.freq_smoothing)
        freq_update(freq, pair_items)  # pre-pass: probabilities fixed for the epoch
        order = rng.permutation(pair_users.size)
        for lo in range(0, order.size, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            users = pair_users[batch]
            positives = pair_items[batch]
            if is_dmf:
                Q = query_forward_batch(model, users)
                batch_bags = None
            else:
                batch_bags = [pair_bags[i] for i in batch]
                Q = query_forward_batch(model, batch_bags)
            V = model.item_table.weights[positives]  # fancy indexing copies

            out = inbatch_softmax_loss(
                Q,
                V,
                positives,
                cache=cache,
                freq=freq,
                temperature=temperature,
                use_logq=cfg.use_logq,
                use_cache=cfg.use_cache,
                use_mask=cfg.use_mask,
            )

            if is_dmf:
                q_rows, q_grads = users, out.grad_query
            else:
                q_rows, q_grads = pooled_backward_rows(batch_bags, out.grad_query, pooling)
            if shared:
                rows = np.concatenate([q_rows, positives])
                grads = np.concatenate([q_grads, out.grad_item], axis=0)
                apply_gradients(model.item_table, rows, grads, cfg.lr, cfg.adagrad_eps)
            else:
                query_table = model.user_table if is_dmf else model.query_store_table
                apply_gradients(query_table, q_rows, q_grads, cfg.lr, cfg.adagrad_eps)
                apply_gradients(model.item_table, positives, out.grad_item, cfg.lr, cfg.adagrad_eps)

            step += 1
            log.steps.append(StepRecord(step=step, epoch=epoch, loss=out.loss))
            if cfg.eval_every_steps and step % cfg.eval_every_steps == 0:
                log.evals.append(EvalRecord(step=step, hit_rate=probe.hit_rates(model)))
        log.epoch_seconds.append(time.perf_counter() - t0)

    return model, log


def steps_to_threshold(log: TrainingLog, metric: str = "hit_rate", k: int = 20, threshold: float = 0.0):
    """Earliest evaluated step whose metric reaches the threshold, else None."""
    if metric != "hit_rate":
        raise ValueError(f"unknown metric: {metric!r}")
    for record in log.evals:
        if k not in record.hit_rate:
            raise ValueError(f"hit_rate@{k} was not evaluated during training")
        if record.hit_rate[k] >= threshold:
            return record.step
    return None


def write_log_jsonl(log: TrainingLog, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for s in log.steps:
            fh.write(json.dumps({"type": "step", "step": s.step, "epoch": s.epoch, "loss": s.loss}) + "\n")
        for e in log.evals:
            fh.write(
                json.dumps(
                    {"type": "eval", "step": e.step, "hit_rate": {str(k): v for k, v in sorted(e.hit_rate.items())}}
                )
                + "\n"
            )
        for i, sec in enumerate(log.epoch_seconds, start=1):
            fh.write(json.dumps({"type": "epoch", "epoch": i, "seconds": sec}) + "\n")


def read_log_jsonl(path) -> TrainingLog:
    log = TrainingLog()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            if obj["type"] == "step":
                log.steps.append(StepRecord(step=obj["step"], epoch=obj["epoch"], loss=obj["loss"]))
            elif obj["type"] == "eval":
                log.evals.append(
                    EvalRecord(step=obj["step"], hit_rate={int(k): v for k, v in obj["hit_rate"].items()})
                )
            elif obj["type"] == "epoch":
                log.epoch_seconds.append(obj["seconds"])
    return log


def write_log_csv(log: TrainingLog, path) -> None:
    """Loss/metric curve: step,loss,hit_rate_at_<k>,... (blank between evals)."""
    ks = sorted({k for e in log.evals for k in e.hit_rate})
    evals_by_step = {e.step: e for e in log.evals}
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"] + [f"hit_rate_at_{k}" for k in ks])
        for s in log.steps:
            row = [s.step, repr(s.loss)]
            e = evals_by_step.get(s.step)
            row += [repr(e.hit_rate[k]) if e else "" for k in ks]
            writer.writerow(row)


def save_checkpoint(model: TwoTowerModel, path) -> None:
    """Text config header plus one or two binary table blocks."""
    cfg = model.config
    shared = model.query_store_table is model.item_table
    lines = [
        CHECKPOINT_HEADER,
        f"variant={cfg.variant.value}",
        f"dim={cfg.dim}",
        f"temperature={cfg.temperature!r}",
        f"pooling={cfg.pooling}",
        f"seed={cfg.seed}",
        f"init_scale={cfg.init_scale!r}",
        f"n_users={model.n_users}",
        f"shared={'true' if shared else 'false'}",
    ]
    with Path(path).open("wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("ascii"))
        if cfg.variant is Variant.DMF:
            write_table_block(fh, model.user_table)
            write_table_block(fh, model.item_table)
        elif shared:
            write_table_block(fh, model.item_table)
        else:
            write_table_block(fh, model.query_store_table)
            write_table_block(fh, model.item_table)


def load_checkpoint(path) -> TwoTowerModel:
    with Path(path).open("rb") as fh:
        header_lines = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError("truncated checkpoint header")
            text = line.decode("ascii", errors="replace").rstrip("\n")
            if text == "":
                break
            header_lines.append(text)
        if not header_lines or header_lines[0] != CHECKPOINT_HEADER:
            raise FormatError(f"bad checkpoint header: {header_lines[:1]!r}")
        fields = dict(item.split("=", 1) for item in header_lines[1:])
        try:
            config = ModelConfig(
                variant=Variant(fields["variant"]),
                dim=int(fields["dim"]),
                temperature=float(fields["temperature"]),
                pooling=fields["pooling"],
                seed=int(fields["seed"]),
                init_scale=float(fields["init_scale"]),
            )
            n_users = int(fields["n_users"])
            shared = fields["shared"] == "true"
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad checkpoint header field: {exc}") from None

        if config.variant is Variant.DMF:
            user_table = read_table_block(fh)
            item_table = read_table_block(fh)
            model = TwoTowerModel(config=config, user_table=user_table, item_table=item_table, n_users=n_users)
        elif shared:
            table = read_table_block(fh)
            model = TwoTowerModel(config=config, query_store_table=table, item_table=table, n_users=n_users)
        else:
            query_table = read_table_block(fh)
            item_table = read_table_block(fh)
            model = TwoTowerModel(
                config=config, query_store_table=query_table, item_table=item_table, n_users=n_users
            )
        if fh.read(1):
            raise FormatError("trailing bytes after table blocks")
    return model
