"""Interaction logs, ID vocabularies, temporal splits, and bag-of-stores features.

File formats:
  JSONL  one object per line, keys "user" (str), "store" (str), "ts" (int
         seconds since epoch), optional "source" (str). UTF-8, LF endings.
  CSV    header ``user,store,ts[,source]``, RFC-4180 quoting. An empty
         source cell reads back as None.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SECONDS_PER_DAY = 86_400


class ParseError(ValueError):
    """A line in an interaction file could not be parsed."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class TooManyMalformedLines(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


class UnknownStoreError(KeyError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    """One (user, store, timestamp) event; the unit of training data."""

    user_id: str
    store_id: str
    timestamp: int
    source: str | None = None

    def __post_init__(self):
        if not self.user_id:
            raise ValueError("user_id must be non-empty")
        if not self.store_id:
            raise ValueError("store_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")


@dataclass
class Vocabulary:
    """Bijection between string tokens and dense indices [0, n)."""

    token_to_index: dict[str, int] = field(default_factory=dict)
    index_to_token: list[str] = field(default_factory=list)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        """Build a vocabulary assigning indices in first-appearance order."""
        vocab = cls()
        for tok in tokens:
            if tok not in vocab.token_to_index:
                vocab.token_to_index[tok] = len(vocab.index_to_token)
                vocab.index_to_token.append(tok)
        return vocab

    @property
    def n(self) -> int:
        return len(self.index_to_token)

    def __len__(self) -> int:
        return self.n

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def index(self, token: str) -> int:
        return self.token_to_index[token]

    def token(self, index: int) -> str:
        return self.index_to_token[index]


@dataclass(frozen=True)
class BagOfStores:
    """Store indices a user previously ordered from, most recent first.

    Duplicates are kept: repetition is the only frequency signal mean
    pooling can see. ``as_of`` is the timestamp the bag was built at.
    """

    store_indices: tuple[int, ...]
    as_of: int

    def __len__(self) -> int:
        return len(self.store_indices)


@dataclass
class SplitDataset:
    train: list[InteractionRecord]
    validation: list[InteractionRecord]
    split_time: int


def _record_from_fields(user, store, ts, source, line_no: int) -> InteractionRecord:
    if not isinstance(user, str) or not user:
        raise ParseError(line_no, f"bad user field: {user!r}")
    if not isinstance(store, str) or not store:
        raise ParseError(line_no, f"bad store field: {store!r}")
    if isinstance(ts, bool) or not isinstance(ts, int):
        try:
            ts = int(ts)
        except (TypeError, ValueError):
            raise ParseError(line_no, f"bad ts field: {ts!r}") from None
    if ts < 0:
        raise ParseError(line_no, f"negative ts: {ts}")
    if source is not None and not isinstance(source, str):
        raise ParseError(line_no, f"bad source field: {source!r}")
    return InteractionRecord(user, store, ts, source or None)


def _parse_jsonl_line(line: str, line_no: int) -> InteractionRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ParseError(line_no, "expected a JSON object")
    missing = {"user", "store", "ts"} - obj.keys()
    if missing:
        raise ParseError(line_no, f"missing keys: {sorted(missing)}")
    return _record_from_fields(obj["user"], obj["store"], obj["ts"], obj.get("source"), line_no)


def ingest_interactions(
    path: str | Path,
    format: str = "jsonl",
    max_malformed: int = 0,
) -> list[InteractionRecord]:
    """Read interaction records from a JSONL or CSV file, in file order.

    Up to ``max_malformed`` bad lines are skipped and reported with a
    warning; one more raises. With the default of 0, the first bad line
    raises ParseError directly.
    """
    path = Path(path)
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown format: {format!r}")
    if not path.exists():
        raise FileNotFoundError(path)

    records: list[InteractionRecord] = []
    bad: list[ParseError] = []

    def note(err: ParseError):
        if max_malformed <= 0:
            raise err
        bad.append(err)
        if len(bad) > max_malformed:
            raise TooManyMalformedLines(
                f"{len(bad)} malformed lines exceeds tolerance {max_malformed}; last: {err}"
            )

    with path.open("r", encoding="utf-8", newline="") as fh:
        if format == "jsonl":
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(_parse_jsonl_line(line, line_no))
                except ParseError as exc:
                    note(exc)
        else:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return []
            if header[:3] != ["user", "store", "ts"]:
                raise ParseError(1, f"bad CSV header: {header!r}")
            has_source = len(header) > 3 and header[3] == "source"
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    if len(row) < 3:
                        raise ParseError(line_no, f"expected >= 3 columns, got {len(row)}")
                    source = row[3] if has_source and len(row) > 3 and row[3] else None
                    records.append(_record_from_fields(row[0], row[1], row[2], source, line_no))
                except ParseError as exc:
                    note(exc)

    if bad:
        warnings.warn(f"skipped {len(bad)} malformed lines in {path}", stacklevel=2)
    return records


def write_interactions(records: Iterable[InteractionRecord], path: str | Path, format: str = "jsonl") -> None:
    """Write records in a format ``ingest_interactions`` round-trips."""
    path = Path(path)
    if format == "jsonl":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                obj = {"user": r.user_id, "store": r.store_id, "ts": r.timestamp}
                if r.source is not None:
                    obj["source"] = r.source
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
    elif format == "csv":
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["user", "store", "ts", "source"])
            for r in records:
                writer.writerow([r.user_id, r.store_id, r.timestamp, r.source or ""])
    else:
        raise ValueError(f"unknown format: {format!r}")


def build_vocabularies(records: Sequence[InteractionRecord]) -> tuple[Vocabulary, Vocabulary]:
    """User and store vocabularies, indices in first-appearance order."""
    users = Vocabulary.from_tokens(r.user_id for r in records)
    stores = Vocabulary.from_tokens(r.store_id for r in records)
    return users, stores


def temporal_split(records: Sequence[InteractionRecord], validation_days: int = 7) -> SplitDataset:
    """Hold out the last ``validation_days`` days of data for validation.

    split_time = max timestamp - validation_days in seconds; train records
    are strictly before it, validation records at or after it.
    """
    if not records:
        raise EmptyDatasetError("cannot split an empty record list")
    if validation_days < 1:
        raise ValueError(f"validation_days must be >= 1, got {validation_days}")
    split_time = max(r.timestamp for r in records) - validation_days * SECONDS_PER_DAY
    train = [r for r in records if r.timestamp < split_time]
    validation = [r for r in records if r.timestamp >= split_time]
    if not train:
        warnings.warn("temporal split produced an empty training partition", stacklevel=2)
    if not validation:
        warnings.warn("temporal split produced an empty validation partition", stacklevel=2)
    return SplitDataset(train=train, validation=validation, split_time=split_time)


def build_bow_features(
    train: Sequence[InteractionRecord],
    user_vocab: Vocabulary,
    store_vocab: Vocabulary,
    as_of: int,
    window_days: int = 120,
    max_bag_len: int = 50,
) -> dict[int, BagOfStores]:
    """Per-user bags of previously ordered stores, most recent first.

    Includes interactions with ``0 <= as_of - ts <= window_days`` days,
    sorted by descending timestamp (ties keep original record order) and
    truncated to ``max_bag_len``. Every user in the vocabulary gets an
    entry; users with nothing in the window get an empty bag.
    """
    if window_days < 1:
        raise ValueError(f"window_days must be >= 1, got {window_days}")
    if max_bag_len < 1:
        raise ValueError(f"max_bag_len must be >= 1, got {max_bag_len}")
    window = window_days * SECONDS_PER_DAY

    per_user: dict[int, list[tuple[int, int]]] = {user_vocab.index(t): [] for t in user_vocab.index_to_token}
    for r in train:
        if not (0 <= as_of - r.timestamp <= window):
            continue
        if r.store_id not in store_vocab:
            raise UnknownStoreError(r.store_id)
        u = user_vocab.index(r.user_id)
        if u not in per_user:
            per_user[u] = []
        per_user[u].append((r.timestamp, store_vocab.index(r.store_id)))

    features: dict[int, BagOfStores] = {}
    for u, items in per_user.items():
        items.sort(key=lambda pair: -pair[0])  # stable: ties keep input order
        features[u] = BagOfStores(
            store_indices=tuple(s for _, s in items[:max_bag_len]),
            as_of=as_of,
        )
    return features


def build_per_example_bags(
    train: Sequence[InteractionRecord],
    user_vocab: Vocabulary,
    store_vocab: Vocabulary,
    window_days: int = 120,
    max_bag_len: int = 50,
) -> list[BagOfStores]:
    """A leakage-free bag for every training record, aligned with input order.

    Record i's bag holds the same user's strictly earlier orders (earlier
    timestamp, or equal timestamp and earlier file position), windowed and
    truncated like build_bow_features but anchored at the record's own
    timestamp. A user's first order gets an empty bag.
    """
    if window_days < 1:
        raise ValueError(f"window_days must be >= 1, got {window_days}")
    if max_bag_len < 1:
        raise ValueError(f"max_bag_len must be >= 1, got {max_bag_len}")
    window = window_days * SECONDS_PER_DAY

    order: dict[int, list[tuple[int, int, int]]] = {}  # user -> [(ts, pos, store idx)]
    for pos, r in enumerate(train):
        if r.store_id not in store_vocab:
            raise UnknownStoreError(r.store_id)
        order.setdefault(user_vocab.index(r.user_id), []).append(
            (r.timestamp, pos, store_vocab.index(r.store_id))
        )

    bags: list[BagOfStores | None] = [None] * len(train)
    for history in order.values():
        history.sort()  # (ts, file position): stable "strictly before" order
        for k, (ts, pos, _store) in enumerate(history):
            earlier = history[max(0, k - max_bag_len) : k]
            in_window = [s for t, _, s in reversed(earlier) if ts - t <= window]
            bags[pos] = BagOfStores(store_indices=tuple(in_window), as_of=ts)
    return bags


def export_bow_snapshot(
    features: dict[int, BagOfStores],
    user_vocab: Vocabulary,
    store_vocab: Vocabulary,
    path: str | Path,
) -> None:
    """Dump the feature map as JSONL: {"user", "bag" (store tokens), "as_of"}."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u in sorted(features):
            bag = features[u]
            obj = {
                "user": user_vocab.token(u),
                "bag": [store_vocab.token(s) for s in bag.store_indices],
                "as_of": bag.as_of,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
