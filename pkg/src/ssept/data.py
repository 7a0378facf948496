"""Interaction logs, per-user sequences, leave-last-two splits and windowing.

Index 0 is reserved for padding in both the user and item index spaces; real
users and items are numbered from 1 in first-seen order.
"""
from __future__ import annotations

import io
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
SEQ_MAGIC = b"SEQ1"

# named delimiter presets accepted by load_interactions / the CLI
DELIMITERS = {"tab": "\t", "movielens": "::", "comma": ",", "space": None}


class ParseError(ValueError):
    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass
class LoadReport:
    records: list[InteractionRecord]
    malformed: list[int] = field(default_factory=list)  # 1-based line numbers


def _split_fields(line: str, delimiter: str | None) -> list[str]:
    if delimiter is None:
        return line.split()
    return [f.strip() for f in line.split(delimiter)]


def load_interactions(
    source: TextIO | str | Path,
    delimiter: str | None = "\t",
    strict: bool = False,
) -> LoadReport:
    """Parse ``user, item[, rating], timestamp`` lines.

    A rating column, when present (four fields), is ignored. Blank lines are
    skipped silently. Malformed lines are collected; with ``strict`` the first
    one raises :class:`ParseError`.
    """
    delimiter = DELIMITERS.get(delimiter, delimiter) if isinstance(delimiter, str) else delimiter
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_interactions(fh, delimiter, strict)

    records: list[InteractionRecord] = []
    malformed: list[int] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = _split_fields(line, delimiter)
        rec = None
        if len(parts) in (3, 4) and parts[0] and parts[1]:
            try:
                ts = int(parts[-1])
            except ValueError:
                ts = -1
            if ts >= 0:
                rec = InteractionRecord(parts[0], parts[1], ts)
        if rec is None:
            if strict:
                raise ParseError(f"malformed interaction on line {lineno}: {line!r}", lineno)
            malformed.append(lineno)
            continue
        records.append(rec)
    if malformed:
        logger.warning("skipped %d malformed lines (first: line %d)", len(malformed), malformed[0])
    return LoadReport(records, malformed)


def filter_min_counts(records: list[InteractionRecord], min_user: int = 1,
                      min_item: int = 1) -> list[InteractionRecord]:
    """Keep records whose user and item each have at least the given counts (single pass)."""
    if min_user <= 1 and min_item <= 1:
        return list(records)
    uc = Counter(r.user for r in records)
    ic = Counter(r.item for r in records)
    return [r for r in records if uc[r.user] >= min_user and ic[r.item] >= min_item]


class IdMaps:
    """Bijections between raw string ids and contiguous indices 1..n / 1..m."""

    def __init__(self, users: Iterable[str] = (), items: Iterable[str] = ()):
        self.user_to_index: dict[str, int] = {}
        self.item_to_index: dict[str, int] = {}
        self.index_to_user: list[str | None] = [None]
        self.index_to_item: list[str | None] = [None]
        for u in users:
            self.user_index(u)
        for i in items:
            self.item_index(i)

    @property
    def n_users(self) -> int:
        return len(self.index_to_user) - 1

    @property
    def n_items(self) -> int:
        return len(self.index_to_item) - 1

    def user_index(self, raw: str) -> int:
        idx = self.user_to_index.get(raw)
        if idx is None:
            idx = self.user_to_index[raw] = len(self.index_to_user)
            self.index_to_user.append(raw)
        return idx

    def item_index(self, raw: str) -> int:
        idx = self.item_to_index.get(raw)
        if idx is None:
            idx = self.item_to_index[raw] = len(self.index_to_item)
            self.index_to_item.append(raw)
        return idx


@dataclass
class UserSequence:
    user: int
    items: list[int]


def build_sequences(records: list[InteractionRecord],
                    maps: IdMaps | None = None) -> tuple[list[UserSequence], IdMaps]:
    """Group records per user, ordered by (timestamp, file position).

    Missing ids are added to ``maps`` in first-seen order. Sequences are
    returned in user-index order.
    """
    maps = maps if maps is not None else IdMaps()
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for pos, r in enumerate(records):
        u = maps.user_index(r.user)
        per_user.setdefault(u, []).append((r.timestamp, pos, maps.item_index(r.item)))
    seqs = []
    for u in sorted(per_user):
        events = sorted(per_user[u])
        seqs.append(UserSequence(u, [item for _, _, item in events]))
    return seqs, maps


@dataclass
class DatasetSplit:
    """Leave-last-two split. ``valid``/``test`` only hold users with >= 3 items."""

    n_users: int
    n_items: int
    train: dict[int, list[int]]
    valid: dict[int, int]
    test: dict[int, int]
    full_history: dict[int, set[int]]

    def eval_users(self, split: str) -> list[int]:
        held = self.valid if split == "valid" else self.test
        return sorted(held)

    def history_before(self, user: int, split: str) -> list[int]:
        """Items the model may read when predicting the held-out item of ``split``."""
        if split == "valid":
            return self.train[user]
        if split == "test":
            return self.train[user] + [self.valid[user]]
        raise ValueError(f"unknown split {split!r}")


def split_leave_last_two(sequences: list[UserSequence], n_users: int | None = None,
                         n_items: int | None = None) -> DatasetSplit:
    train, valid, test, full = {}, {}, {}, {}
    for s in sequences:
        items = list(s.items)
        full[s.user] = set(items)
        if len(items) >= 3:
            train[s.user] = items[:-2]
            valid[s.user] = items[-2]
            test[s.user] = items[-1]
        else:
            train[s.user] = items
    if n_users is None:
        n_users = max((s.user for s in sequences), default=0)
    if n_items is None:
        n_items = max((max(s.items) for s in sequences if s.items), default=0)
    return DatasetSplit(n_users, n_items, train, valid, test, full)


def sequence_stats(sequences: list[UserSequence]) -> dict[str, float]:
    lengths = [len(s.items) for s in sequences]
    items = {i for s in sequences for i in s.items}
    return {
        "users": len(sequences),
        "items": len(items),
        "interactions": sum(lengths),
        "avg_len": (sum(lengths) / len(lengths)) if lengths else 0.0,
        "max_len": max(lengths, default=0),
    }


# ---------------------------------------------------------------- windows


@dataclass(frozen=True)
class WindowConfig:
    max_len: int = 50
    sampling_prob: float = 0.0

    def __post_init__(self):
        if self.max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {self.max_len}")
        if not 0.0 <= self.sampling_prob <= 1.0:
            raise ValueError(f"sampling_prob must lie in [0, 1], got {self.sampling_prob}")


def left_pad(items, T: int) -> np.ndarray:
    """The most recent ``T`` items, left-padded with :data:`PAD`."""
    out = np.zeros(T, dtype=np.int64)
    tail = list(items)[-T:]
    if tail:
        out[T - len(tail):] = tail
    return out


def pad_and_window(train_items, cfg: WindowConfig, rng: np.random.Generator) -> np.ndarray:
    """Choose the length-T input view of a training sequence.

    Sequences that fit are left-padded. Longer ones (``t > T``) use a uniformly
    chosen 1-based start ``v`` in ``[1, t - T]`` with probability
    ``sampling_prob`` and the most recent ``T`` items otherwise. The RNG is
    only consulted for sequences longer than ``T`` with a positive
    ``sampling_prob``.
    """
    items = list(train_items)
    if not items:
        raise ValueError("cannot window an empty training sequence")
    T, t = cfg.max_len, len(items)
    if t <= T or cfg.sampling_prob == 0.0:
        return left_pad(items, T)
    if rng.random() < cfg.sampling_prob:
        v = int(rng.integers(1, t - T + 1))
        return np.asarray(items[v - 1:v - 1 + T], dtype=np.int64)
    return np.asarray(items[t - T:], dtype=np.int64)


def training_pairs(window: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shift-by-one pairs: input ``window[:-1]`` predicts target ``window[1:]``.

    A step is valid only when both its input and its target are real items.
    """
    window = np.asarray(window, dtype=np.int64)
    inputs, targets = window[:-1], window[1:]
    return inputs, targets, (inputs != PAD) & (targets != PAD)


# ---------------------------------------------------------------- sequence cache


def save_sequence_cache(path: str | Path, sequences: list[UserSequence], maps: IdMaps) -> None:
    """Binary cache: ``SEQ1``, u32 user/item counts, u32 sequence count, then
    per sequence (u32 user, u32 length, u32 items...), then every raw user id
    and raw item id as (u32 byte length, UTF-8 bytes) in index order.
    """
    buf = io.BytesIO()
    buf.write(SEQ_MAGIC)
    buf.write(struct.pack("<III", maps.n_users, maps.n_items, len(sequences)))
    for s in sequences:
        buf.write(struct.pack("<II", s.user, len(s.items)))
        buf.write(np.asarray(s.items, dtype="<u4").tobytes())
    for raw in maps.index_to_user[1:] + maps.index_to_item[1:]:
        b = raw.encode("utf-8")
        buf.write(struct.pack("<I", len(b)))
        buf.write(b)
    Path(path).write_bytes(buf.getvalue())


def load_sequence_cache(path: str | Path) -> tuple[list[UserSequence], IdMaps]:
    blob = Path(path).read_bytes()
    if blob[:4] != SEQ_MAGIC:
        raise ParseError(f"{path}: not a sequence cache (bad magic)")
    try:
        n_users, n_items, n_seq = struct.unpack_from("<III", blob, 4)
        off = 16
        seqs = []
        for _ in range(n_seq):
            user, length = struct.unpack_from("<II", blob, off)
            off += 8
            items = np.frombuffer(blob, dtype="<u4", count=length, offset=off)
            off += 4 * length
            seqs.append(UserSequence(int(user), [int(i) for i in items]))
        raws = []
        for _ in range(n_users + n_items):
            (ln,) = struct.unpack_from("<I", blob, off)
            off += 4
            raws.append(blob[off:off + ln].decode("utf-8"))
            off += ln
    except (struct.error, ValueError) as exc:
        raise ParseError(f"{path}: truncated sequence cache") from exc
    return seqs, IdMaps(raws[:n_users], raws[n_users:])
