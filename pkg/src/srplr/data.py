"""Interaction ingestion, k-core filtering, leave-one-out splits and samplers.

Dense ids start at 1; id 0 is the padding id everywhere.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0


class ParseError(ValueError):
    """A malformed row in an interaction file."""

    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")


@dataclass(frozen=True)
class SequenceExample:
    user: int
    history: tuple[int, ...]
    target: int
    history_len: int


@dataclass
class DatasetSplit:
    item_count: int
    user_count: int
    max_len: int
    train: list[SequenceExample]
    valid: list[SequenceExample]
    test: list[SequenceExample]
    user_map: dict[str, int]
    item_map: dict[str, int]
    num_interactions: int = 0
    dropped_users: int = 0

    def fingerprint(self) -> str:
        """Stable hash of the item id map; checkpoints refuse mismatches."""
        import hashlib

        h = hashlib.sha256()
        for raw, dense in sorted(self.item_map.items(), key=lambda kv: kv[1]):
            h.update(f"{dense}\t{raw}\n".encode())
        return h.hexdigest()[:16]

    def stats(self) -> dict:
        n_users, n_items, n = self.user_count, self.item_count, self.num_interactions
        return {
            "users": n_users,
            "items": n_items,
            "ratings": n,
            "avg_len": n / n_users if n_users else 0.0,
            "sparsity": 1.0 - n / (n_users * n_items) if n_users and n_items else 1.0,
        }


# ---------------------------------------------------------------------------
# loading


def load_interactions(
    path,
    format: str = "tsv",
    columns: Sequence[str | int | None] = ("user_id", "item_id", "timestamp"),
    header: bool | None = None,
    delimiter: str | None = None,
) -> list[Interaction]:
    """Parse a delimiter-separated interaction log.

    ``columns`` names the user, item and timestamp columns. When ``header``
    is None the first row is treated as a header iff it contains the user and
    item column names. Without a header, columns are positional (0, 1, 2),
    unless ``columns`` gives integer positions, e.g. (0, 1, 3) for a
    user,item,rating,timestamp file. A timestamp column of None makes the
    line ordinal the timestamp.
    """
    if format not in ("tsv", "csv"):
        raise ValueError(f"unknown format {format!r}")
    if delimiter is None:
        delimiter = "\t" if format == "tsv" else ","
    path = Path(path)
    user_col, item_col, ts_col = columns

    out: list[Interaction] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        positional = all(isinstance(c, int) for c in columns if c is not None)
        if positional:
            idx = tuple(columns)
        else:
            idx = (0, 1, 2 if ts_col is not None else None)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1 and positional and header:
                continue
            if lineno == 1 and not positional:
                is_header = header
                if is_header is None:
                    is_header = user_col in row and item_col in row
                if is_header:
                    try:
                        idx = (
                            row.index(user_col),
                            row.index(item_col),
                            row.index(ts_col) if ts_col is not None else None,
                        )
                    except ValueError as exc:
                        raise ParseError(path, lineno, f"header missing column: {exc}") from None
                    continue
            if not row or all(not c.strip() for c in row):
                continue
            need = max(i for i in idx if i is not None)
            if len(row) <= need:
                raise ParseError(path, lineno, f"expected at least {need + 1} columns, got {len(row)}")
            user, item = row[idx[0]].strip(), row[idx[1]].strip()
            if not user or not item:
                raise ParseError(path, lineno, "empty user or item id")
            if idx[2] is None:
                ts = len(out)
            else:
                raw = row[idx[2]].strip()
                try:
                    ts = int(raw)
                except ValueError:
                    try:
                        ts = int(float(raw))
                    except ValueError:
                        raise ParseError(path, lineno, f"bad timestamp {raw!r}") from None
            out.append(Interaction(user, item, ts))
    return out


# ---------------------------------------------------------------------------
# filtering and splitting


def k_core_filter(interactions: list[Interaction], k: int) -> list[Interaction]:
    """Keep the maximal subset where every user and item has >= k events.

    Removal is iterated until nothing changes; order of the survivors is the
    input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    alive = list(interactions)
    while True:
        users = Counter(x.user_id for x in alive)
        items = Counter(x.item_id for x in alive)
        kept = [x for x in alive if users[x.user_id] >= k and items[x.item_id] >= k]
        if len(kept) == len(alive):
            return kept
        alive = kept


def _chronological(interactions: Iterable[Interaction]) -> dict[str, list[str]]:
    per_user: dict[str, list[tuple[int, int, str]]] = defaultdict(list)
    for order, x in enumerate(interactions):
        per_user[x.user_id].append((x.timestamp, order, x.item_id))
    return {u: [item for _, _, item in sorted(evts)] for u, evts in per_user.items()}


def pad_left(seq: Sequence[int], max_len: int) -> tuple[int, ...]:
    seq = list(seq)[-max_len:]
    return (PAD,) * (max_len - len(seq)) + tuple(seq)


def _example(user: int, prefix: list[int], target: int, max_len: int) -> SequenceExample:
    hist = pad_left(prefix, max_len)
    return SequenceExample(user, hist, target, sum(1 for h in hist if h != PAD))


def build_splits(
    interactions: list[Interaction], max_len: int, all_prefixes: bool = True
) -> DatasetSplit:
    """Leave-one-out split: last item is test, second-to-last is valid.

    Train gets one example per target position 2..L-2 (or only position L-2
    when ``all_prefixes`` is False). Users with fewer than 3 interactions are
    dropped.
    """
    if max_len < 1:
        raise ValueError("max_len must be positive")
    sequences = _chronological(interactions)
    short = [u for u, s in sequences.items() if len(s) < 3]
    if short:
        logger.warning("dropping %d users with fewer than 3 interactions", len(short))
        for u in short:
            del sequences[u]

    user_map = {u: i for i, u in enumerate(sorted(sequences), start=1)}
    item_map = {
        it: i for i, it in enumerate(sorted({it for s in sequences.values() for it in s}), start=1)
    }

    train, valid, test = [], [], []
    n = 0
    for raw_user in sorted(sequences):
        u = user_map[raw_user]
        seq = [item_map[it] for it in sequences[raw_user]]
        n += len(seq)
        L = len(seq)
        test.append(_example(u, seq[: L - 1], seq[L - 1], max_len))
        valid.append(_example(u, seq[: L - 2], seq[L - 2], max_len))
        # 0-based target positions 1..L-3 correspond to positions 2..L-2
        first = 1 if all_prefixes else L - 3
        for t in range(max(first, 1), L - 2):
            train.append(_example(u, seq[:t], seq[t], max_len))

    return DatasetSplit(
        item_count=len(item_map),
        user_count=len(user_map),
        max_len=max_len,
        train=train,
        valid=valid,
        test=test,
        user_map=user_map,
        item_map=item_map,
        num_interactions=n,
        dropped_users=len(short),
    )


def examples_to_arrays(examples: Sequence[SequenceExample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(users, histories, targets) as int64 arrays."""
    if not examples:
        return np.zeros(0, np.int64), np.zeros((0, 0), np.int64), np.zeros(0, np.int64)
    users = np.fromiter((e.user for e in examples), np.int64, len(examples))
    hist = np.asarray([e.history for e in examples], dtype=np.int64)
    targets = np.fromiter((e.target for e in examples), np.int64, len(examples))
    return users, hist, targets


# ---------------------------------------------------------------------------
# negatives and masking


def sample_logic_negatives(
    example: SequenceExample, count: int, item_count: int, rng: np.random.Generator
) -> list[int]:
    """Draw ``count`` distinct items uniformly outside history and target."""
    if not 0 <= count <= 10:
        raise ValueError(f"count must be in [0, 10], got {count}")
    if count == 0:
        return []
    excluded = {h for h in example.history if h != PAD} | {example.target}
    eligible = np.setdiff1d(np.arange(1, item_count + 1), np.fromiter(excluded, np.int64))
    if count > len(eligible):
        raise ValueError(
            f"cannot draw {count} negatives: only {len(eligible)} items outside the history"
        )
    return [int(x) for x in rng.choice(eligible, size=count, replace=False)]


def sample_negatives_batch(
    histories: np.ndarray,
    targets: np.ndarray,
    count: int,
    item_count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorised form of :func:`sample_logic_negatives` over a batch.

    Columns are drawn one at a time by rejection, which is sequential uniform
    sampling without replacement from each row's eligible set.
    """
    B = len(targets)
    out = np.zeros((B, count), dtype=np.int64)
    if count == 0 or B == 0:
        return out
    excluded = np.concatenate([histories, targets[:, None]], axis=1)
    srt = np.sort(excluded, axis=1)
    distinct = ((np.diff(srt, axis=1) != 0) & (srt[:, 1:] != PAD)).sum(axis=1) + (srt[:, 0] != PAD)
    if np.any(item_count - distinct < count):
        raise ValueError(f"cannot draw {count} negatives for some rows: catalogue exhausted")
    for c in range(count):
        block = np.concatenate([excluded, out[:, :c]], axis=1)
        pending = np.arange(B)
        while len(pending):
            draw = rng.integers(1, item_count + 1, size=len(pending))
            bad = (block[pending] == draw[:, None]).any(axis=1)
            out[pending[~bad], c] = draw[~bad]
            pending = pending[bad]
    return out


def mask_history(example: SequenceExample, r: float, rng: np.random.Generator) -> SequenceExample:
    """Drop each history item with probability ``r``; the last item always survives
    when everything would otherwise be dropped. The result is re-left-padded."""
    if not 0.0 <= r <= 1.0:
        raise ValueError("r must be a probability")
    real = [h for h in example.history if h != PAD]
    if r == 0.0 or not real:
        return example
    drop = rng.random(len(real)) < r
    kept = [h for h, d in zip(real, drop) if not d]
    if not kept:
        kept = [real[-1]]
    hist = pad_left(kept, len(example.history))
    return SequenceExample(example.user, hist, example.target, len(kept))


def mask_histories_batch(histories: np.ndarray, r: float, rng: np.random.Generator) -> np.ndarray:
    """Batch masking with the same semantics as :func:`mask_history`."""
    if r <= 0.0:
        return histories
    real = histories != PAD
    drop = (rng.random(histories.shape) < r) & real
    keep = real & ~drop
    # guard: rows losing everything keep their last real item (rightmost, as left-padded)
    empty = ~keep.any(axis=1) & real.any(axis=1)
    if empty.any():
        last = histories.shape[1] - 1 - np.argmax(real[:, ::-1], axis=1)
        keep[np.nonzero(empty)[0], last[empty]] = True
    masked = np.where(keep, histories, PAD)
    return compact_left(masked)


def compact_left(histories: np.ndarray) -> np.ndarray:
    """Move padding to the left of each row, keeping item order."""
    order = np.argsort(histories != PAD, axis=1, kind="stable")
    return np.take_along_axis(histories, order, axis=1)


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class SyntheticSpec:
    users: int
    items: int
    rule: str = "markov"
    seed: int = 0
    min_len: int = 5
    max_len: int = 12
    deterministic: bool = False
    window: int = 3
    segments: tuple[int, int] = (2, 4)

    def __post_init__(self):
        if self.users < 5 or self.items < 5:
            raise ValueError("synthetic corpora need at least 5 users and 5 items")
        if self.rule not in ("markov", "conjunctive"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if not 3 <= self.min_len <= self.max_len:
            raise ValueError("need 3 <= min_len <= max_len")


@dataclass(frozen=True)
class ConjunctiveRule:
    """Planted pairs (a, b) -> c, and a fallback map from the window's last item."""

    pairs: tuple[tuple[int, int, int], ...]
    fallback: dict[int, int] = field(hash=False)
    window: int = 3

    def target(self, window_items: Sequence[int]) -> int:
        present = set(window_items)
        for a, b, c in self.pairs:
            if a in present and b in present:
                return c
        return self.fallback[window_items[-1]]


def markov_table(spec: SyntheticSpec) -> np.ndarray:
    """Row-stochastic (items+1) x (items+1) table; row/col 0 unused.

    The deterministic variant is a single random cycle through all items.
    """
    rng = np.random.default_rng([spec.seed, 1])
    n = spec.items
    table = np.zeros((n + 1, n + 1))
    if spec.deterministic:
        cycle = rng.permutation(np.arange(1, n + 1))
        for a, b in zip(cycle, np.roll(cycle, -1)):
            table[a, b] = 1.0
    else:
        table[1:, 1:] = rng.dirichlet(np.full(n, 0.1), size=n)
    return table


def conjunctive_rule(spec: SyntheticSpec) -> ConjunctiveRule:
    rng = np.random.default_rng([spec.seed, 2])
    n = spec.items
    n_pairs = max(1, n // 8)
    chosen = rng.permutation(np.arange(1, n + 1))[: 3 * n_pairs].reshape(n_pairs, 3)
    pairs = tuple((int(a), int(b), int(c)) for a, b, c in chosen)
    fallback = {i: int(rng.integers(1, n + 1)) for i in range(1, n + 1)}
    return ConjunctiveRule(pairs, fallback, spec.window)


def generate_synthetic(spec: SyntheticSpec) -> list[Interaction]:
    """Deterministic synthetic interaction log for tests and sanity runs."""
    rng = np.random.default_rng([spec.seed, 0])
    out: list[Interaction] = []
    if spec.rule == "markov":
        table = markov_table(spec)
        for u in range(1, spec.users + 1):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            cur = int(rng.integers(1, spec.items + 1))
            seq = [cur]
            for _ in range(length - 1):
                cur = int(rng.choice(spec.items + 1, p=table[cur]))
                seq.append(cur)
            out.extend(Interaction(f"u{u}", f"i{it}", t) for t, it in enumerate(seq))
        return out

    rule = conjunctive_rule(spec)
    outcomes = {c for _, _, c in rule.pairs}
    background = np.array([i for i in range(1, spec.items + 1) if i not in outcomes])
    W = spec.window
    for u in range(1, spec.users + 1):
        seq: list[int] = []
        for _ in range(int(rng.integers(spec.segments[0], spec.segments[1] + 1))):
            win = [int(x) for x in rng.choice(background, size=W)]
            roll = rng.random()
            a, b, _ = rule.pairs[int(rng.integers(len(rule.pairs)))]
            if roll < 0.5 and W >= 2:
                i, j = rng.choice(W, size=2, replace=False)
                win[i], win[j] = a, b
            elif roll < 0.75:
                # decoy: only one half of a pair
                win[int(rng.integers(W))] = a if rng.random() < 0.5 else b
            seq.extend(win)
            seq.append(rule.target(win))
        out.extend(Interaction(f"u{u}", f"i{it}", t) for t, it in enumerate(seq))
    return out


# ---------------------------------------------------------------------------
# on-disk split format


def _write_examples(path: Path, examples: Iterable[SequenceExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            hist = " ".join(str(h) for h in e.history if h != PAD)
            fh.write(f"{e.user}\t{hist}\t{e.target}\n")


def _read_examples(path: Path, max_len: int) -> list[SequenceExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, "expected user<TAB>history<TAB>target")
            user, hist, target = int(parts[0]), [int(x) for x in parts[1].split()], int(parts[2])
            out.append(_example(user, hist, target, max_len))
    return out


def save_split(split: DatasetSplit, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, mapping in (("user_map.txt", split.user_map), ("item_map.txt", split.item_map)):
        with open(out / name, "w", encoding="utf-8") as fh:
            for raw, dense in sorted(mapping.items(), key=lambda kv: kv[1]):
                fh.write(f"{raw}\t{dense}\n")
    for name in ("train", "valid", "test"):
        _write_examples(out / f"{name}.txt", getattr(split, name))
    meta = {
        "max_len": split.max_len,
        "item_count": split.item_count,
        "user_count": split.user_count,
        "num_interactions": split.num_interactions,
        "dropped_users": split.dropped_users,
        "fingerprint": split.fingerprint(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_split(split_dir) -> DatasetSplit:
    d = Path(split_dir)
    meta = json.loads((d / "meta.json").read_text())
    maps = []
    for name in ("user_map.txt", "item_map.txt"):
        m = {}
        with open(d / name, encoding="utf-8") as fh:
            for line in fh:
                raw, dense = line.rstrip("\n").split("\t")
                m[raw] = int(dense)
        maps.append(m)
    L = meta["max_len"]
    split = DatasetSplit(
        item_count=meta["item_count"],
        user_count=meta["user_count"],
        max_len=L,
        train=_read_examples(d / "train.txt", L),
        valid=_read_examples(d / "valid.txt", L),
        test=_read_examples(d / "test.txt", L),
        user_map=maps[0],
        item_map=maps[1],
        num_interactions=meta.get("num_interactions", 0),
        dropped_users=meta.get("dropped_users", 0),
    )
    if meta.get("fingerprint") not in (None, split.fingerprint()):
        raise ValueError(f"{os.fspath(d)}: item map does not match recorded fingerprint")
    return split
