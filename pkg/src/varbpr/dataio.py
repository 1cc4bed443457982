"""Dataset loading, split protocols, synthetic noise injection, and item signals.

Raw rating/implicit logs are remapped to dense contiguous ids (remap tables
are kept for round-tripping). Splits, noise injection, and signal buffers are
all deterministic under their seeds, and signals are computed from training
data only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

FORMATS = ("ml100k_tab", "ml1m_doublecolon", "generic_implicit_csv")

#: Items at or below this popularity quantile form the long tail.
LONG_TAIL_FRACTION = 0.85

RATING_MIN, RATING_MAX = 0.5, 5.0


class ParseError(ValueError):
    """Malformed input file; message carries the offending line number."""


@dataclass
class InteractionLog:
    """Deduplicated (user, item[, rating][, timestamp]) records with dense ids."""

    users: np.ndarray  # int64, dense [0, num_users)
    items: np.ndarray  # int64, dense [0, num_items)
    ratings: np.ndarray | None  # float64, aligned with users/items
    timestamps: np.ndarray | None  # int64
    user_raw_ids: list[str]  # dense id -> raw id
    item_raw_ids: list[str]
    duplicates_dropped: int = 0

    @property
    def num_users(self) -> int:
        return len(self.user_raw_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_raw_ids)

    @property
    def num_records(self) -> int:
        return int(self.users.shape[0])

    @property
    def has_ratings(self) -> bool:
        return self.ratings is not None

    def export_remap_tables(self, user_path, item_path) -> None:
        """Write the raw->dense id tables as CSV ('raw_id,dense_id')."""
        for path, raw in ((user_path, self.user_raw_ids), (item_path, self.item_raw_ids)):
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["raw_id", "dense_id"])
                for dense, rid in enumerate(raw):
                    writer.writerow([rid, dense])


@dataclass
class SplitBundle:
    """Per-user disjoint train/test positive item sets over a fixed id space."""

    train_positives: dict[int, np.ndarray]  # user -> sorted item ids, each non-empty
    test_positives: dict[int, np.ndarray]  # user -> sorted item ids, possibly empty
    user_count: int  # size of the dense user id space
    item_count: int
    dropped_users: int = 0

    @property
    def active_users(self) -> list[int]:
        return sorted(self.train_positives)

    @property
    def total_train_positives(self) -> int:
        return sum(len(v) for v in self.train_positives.values())

    def validate(self) -> "SplitBundle":
        for u, train in self.train_positives.items():
            if len(train) == 0:
                raise ValueError(f"user {u} has no training positives")
            test = self.test_positives.get(u)
            if test is not None and len(np.intersect1d(train, test)) > 0:
                raise ValueError(f"user {u} has overlapping train/test positives")
        return self


@dataclass
class SignalBuffer:
    """Per-item popularity/rarity/quality signals plus the long-tail mask.

    quality is None for datasets without ratings; items with no rated training
    interaction carry NaN there and their quality prior factor is omitted.
    """

    popularity: np.ndarray  # float64 in [0, 1]
    rarity: np.ndarray  # 1 - popularity
    quality: np.ndarray | None  # float64 in (0, 1), NaN where unavailable
    long_tail_mask: np.ndarray  # bool
    train_counts: np.ndarray = field(repr=False, default=None)


def _parse_delimited(path, sep: str):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) < 2:
                raise ParseError(f"{path}:{lineno}: expected at least user{sep}item, got {line!r}")
            user, item = parts[0], parts[1]
            rating = ts = None
            try:
                if len(parts) >= 3 and parts[2] != "":
                    rating = float(parts[2])
                if len(parts) >= 4 and parts[3] != "":
                    ts = int(float(parts[3]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if rating is not None and not (RATING_MIN <= rating <= RATING_MAX):
                raise ParseError(f"{path}:{lineno}: rating {rating} outside [{RATING_MIN}, {RATING_MAX}]")
            records.append((user, item, rating, ts))
    return records


def _parse_generic_csv(path):
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return records
        header = [h.strip().lower() for h in header]
        if header[:2] != ["user", "item"]:
            raise ParseError(f"{path}:1: header must start with 'user,item', got {header}")
        try:
            rating_col = header.index("rating")
        except ValueError:
            rating_col = None
        try:
            ts_col = header.index("timestamp")
        except ValueError:
            ts_col = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ParseError(f"{path}:{lineno}: expected at least user,item, got {row!r}")
            user, item = row[0].strip(), row[1].strip()
            rating = ts = None
            try:
                if rating_col is not None and len(row) > rating_col and row[rating_col].strip():
                    rating = float(row[rating_col])
                if ts_col is not None and len(row) > ts_col and row[ts_col].strip():
                    ts = int(float(row[ts_col]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if rating is not None and not (RATING_MIN <= rating <= RATING_MAX):
                raise ParseError(f"{path}:{lineno}: rating {rating} outside [{RATING_MIN}, {RATING_MAX}]")
            records.append((user, item, rating, ts))
    return records


def _sort_key(raw_ids):
    # Numeric ids sort numerically so dense ids follow the familiar order.
    try:
        return sorted(raw_ids, key=lambda s: (0, int(s)))
    except ValueError:
        return sorted(raw_ids)


def load_ratings(path, fmt: str) -> InteractionLog:
    """Load an interaction file into a dense-id InteractionLog.

    Duplicate (user, item) pairs keep their first occurrence; the count of
    dropped duplicates is recorded on the log.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    if fmt == "ml100k_tab":
        raw = _parse_delimited(path, "\t")
    elif fmt == "ml1m_doublecolon":
        raw = _parse_delimited(path, "::")
    else:
        raw = _parse_generic_csv(path)
    if not raw:
        raise ValueError(f"{path}: no records")

    seen: set[tuple[str, str]] = set()
    records = []
    for rec in raw:
        key = (rec[0], rec[1])
        if key in seen:
            continue
        seen.add(key)
        records.append(rec)
    duplicates = len(raw) - len(records)

    user_raw = _sort_key({r[0] for r in records})
    item_raw = _sort_key({r[1] for r in records})
    umap = {rid: k for k, rid in enumerate(user_raw)}
    imap = {rid: k for k, rid in enumerate(item_raw)}

    users = np.fromiter((umap[r[0]] for r in records), dtype=np.int64, count=len(records))
    items = np.fromiter((imap[r[1]] for r in records), dtype=np.int64, count=len(records))
    any_rating = any(r[2] is not None for r in records)
    any_ts = any(r[3] is not None for r in records)
    ratings = None
    if any_rating:
        ratings = np.array([np.nan if r[2] is None else r[2] for r in records], dtype=np.float64)
    timestamps = None
    if any_ts:
        timestamps = np.array([-1 if r[3] is None else r[3] for r in records], dtype=np.int64)
    return InteractionLog(
        users=users,
        items=items,
        ratings=ratings,
        timestamps=timestamps,
        user_raw_ids=user_raw,
        item_raw_ids=item_raw,
        duplicates_dropped=duplicates,
    )


def _per_user_records(log: InteractionLog):
    by_user: dict[int, list[int]] = {}
    for idx in range(log.num_records):
        by_user.setdefault(int(log.users[idx]), []).append(idx)
    return by_user


def split_clean_test(log: InteractionLog, seed: int) -> SplitBundle:
    """Hold out half of each user's 4+-rated items as a clean test set.

    Everything else (any rating) becomes an implicit training positive.
    Users left without training positives are dropped and counted.
    """
    if not log.has_ratings:
        raise ValueError("clean-test split requires ratings")
    rng = np.random.default_rng(seed)
    train: dict[int, np.ndarray] = {}
    test: dict[int, np.ndarray] = {}
    dropped = 0
    by_user = _per_user_records(log)
    for user in sorted(by_user):
        idxs = np.array(by_user[user], dtype=np.int64)
        items = log.items[idxs]
        ratings = log.ratings[idxs]
        liked = np.sort(items[~np.isnan(ratings) & (ratings >= 4.0)])
        n_test = len(liked) // 2
        test_items = np.sort(rng.choice(liked, size=n_test, replace=False)) if n_test > 0 else np.empty(0, dtype=np.int64)
        train_items = np.setdiff1d(items, test_items)
        if len(train_items) == 0:
            dropped += 1
            continue
        train[user] = train_items.astype(np.int64)
        test[user] = test_items.astype(np.int64)
    return SplitBundle(
        train_positives=train,
        test_positives=test,
        user_count=log.num_users,
        item_count=log.num_items,
        dropped_users=dropped,
    ).validate()


def split_implicit(log: InteractionLog, test_fraction: float, seed: int) -> SplitBundle:
    """Global uniform split of interactions into train/test."""
    if not (0.0 < test_fraction < 1.0):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    n = log.num_records
    n_test = int(np.floor(test_fraction * n))
    perm = rng.permutation(n)
    is_test = np.zeros(n, dtype=bool)
    is_test[perm[:n_test]] = True

    train: dict[int, list[int]] = {}
    test: dict[int, list[int]] = {}
    for idx in range(n):
        u, i = int(log.users[idx]), int(log.items[idx])
        (test if is_test[idx] else train).setdefault(u, []).append(i)

    dropped = 0
    train_out: dict[int, np.ndarray] = {}
    test_out: dict[int, np.ndarray] = {}
    for user in sorted(set(train) | set(test)):
        t = train.get(user)
        if not t:
            dropped += 1
            continue
        train_out[user] = np.sort(np.array(t, dtype=np.int64))
        test_out[user] = np.sort(np.array(test.get(user, []), dtype=np.int64))
    return SplitBundle(
        train_positives=train_out,
        test_positives=test_out,
        user_count=log.num_users,
        item_count=log.num_items,
        dropped_users=dropped,
    ).validate()


def inject_noise(bundle: SplitBundle, rate: float, seed: int, max_retries: int = 1000) -> SplitBundle:
    """Add floor(rate * train size) false-positive pairs to the training split.

    Sampled pairs take a uniform user then a uniform item that is neither a
    train nor test positive of that user (nor already injected). The input
    bundle is left untouched.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    k = int(np.floor(rate * bundle.total_train_positives))
    if k == 0:
        return SplitBundle(
            train_positives=dict(bundle.train_positives),
            test_positives=dict(bundle.test_positives),
            user_count=bundle.user_count,
            item_count=bundle.item_count,
            dropped_users=bundle.dropped_users,
        )
    rng = np.random.default_rng(seed)
    users = bundle.active_users
    taken = {u: set(bundle.train_positives[u].tolist()) | set(bundle.test_positives.get(u, np.empty(0, dtype=np.int64)).tolist()) for u in users}
    injected: dict[int, list[int]] = {}
    for _ in range(k):
        for attempt in range(max_retries):
            u = users[int(rng.integers(len(users)))]
            i = int(rng.integers(bundle.item_count))
            if i not in taken[u]:
                taken[u].add(i)
                injected.setdefault(u, []).append(i)
                break
        else:
            raise RuntimeError(f"could not find an eligible (user, item) pair after {max_retries} retries")
    train = dict(bundle.train_positives)
    for u, extra in injected.items():
        train[u] = np.sort(np.concatenate([train[u], np.array(extra, dtype=np.int64)]))
    return SplitBundle(
        train_positives=train,
        test_positives=dict(bundle.test_positives),
        user_count=bundle.user_count,
        item_count=bundle.item_count,
        dropped_users=bundle.dropped_users,
    ).validate()


def compute_signals(bundle: SplitBundle, log: InteractionLog) -> SignalBuffer:
    """Per-item popularity/quality signals from the training split only.

    popularity(i) = ln(1 + count_i) / ln(1 + max count); quality(i) is the
    sigmoid of the item's mean training rating centered on the global mean
    (NaN when the item has no rated training interaction). The long-tail
    mask marks the bottom LONG_TAIL_FRACTION of items by popularity, ties
    broken by ascending item id.
    """
    n_items = bundle.item_count
    counts = np.zeros(n_items, dtype=np.int64)
    for items in bundle.train_positives.values():
        np.add.at(counts, items, 1)
    max_count = counts.max() if counts.size else 0
    if max_count > 0:
        popularity = np.log1p(counts) / np.log1p(max_count)
    else:
        popularity = np.zeros(n_items, dtype=np.float64)

    quality = None
    if log.has_ratings:
        train_sets = {u: set(v.tolist()) for u, v in bundle.train_positives.items()}
        sums = np.zeros(n_items, dtype=np.float64)
        cnts = np.zeros(n_items, dtype=np.int64)
        total, total_n = 0.0, 0
        for idx in range(log.num_records):
            r = log.ratings[idx]
            if np.isnan(r):
                continue
            u, i = int(log.users[idx]), int(log.items[idx])
            if u in train_sets and i in train_sets[u]:
                sums[i] += r
                cnts[i] += 1
                total += r
                total_n += 1
        quality = np.full(n_items, np.nan)
        if total_n > 0:
            global_mean = total / total_n
            rated = cnts > 0
            centered = sums[rated] / cnts[rated] - global_mean
            quality[rated] = 1.0 / (1.0 + np.exp(-centered))

    order = np.lexsort((np.arange(n_items), popularity))
    n_tail = int(np.ceil(LONG_TAIL_FRACTION * n_items))
    long_tail = np.zeros(n_items, dtype=bool)
    long_tail[order[:n_tail]] = True
    return SignalBuffer(
        popularity=popularity,
        rarity=1.0 - popularity,
        quality=quality,
        long_tail_mask=long_tail,
        train_counts=counts,
    )
