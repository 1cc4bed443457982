"""Enriched-interaction sampling: bags of M positives and N negatives per user.

An epoch visits every training positive exactly once as the anchor (first
slot) of its user's bag; remaining positives are resampled uniformly and
negatives are drawn uniformly from the user's non-interacted items by
rejection. Negatives may silently collide with unobserved test positives —
that false-negative noise is exactly what the inference stage models.

Sampling is vectorized over whole batches (`sample_bags_bulk`); sample_bag is
its single-bag specialization, so every code path shares one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import SplitBundle

_CSR_ATTR = "_sampler_csr_cache"


class _PositiveIndex:
    """CSR view of a bundle's training positives plus a sorted composite key.

    The composite key user * (item_count + 1) + item is globally sorted, so a
    single searchsorted answers membership and locates anchors for any batch
    of (user, item) pairs.
    """

    def __init__(self, bundle: SplitBundle):
        users = bundle.active_users
        self.counts = np.zeros(bundle.user_count, dtype=np.int64)
        for u in users:
            self.counts[u] = len(bundle.train_positives[u])
        self.offsets = np.zeros(bundle.user_count + 1, dtype=np.int64)
        np.cumsum(self.counts, out=self.offsets[1:])
        self.flat = np.empty(int(self.offsets[-1]), dtype=np.int64)
        for u in users:
            self.flat[self.offsets[u] : self.offsets[u + 1]] = bundle.train_positives[u]
        self.stride = bundle.item_count + 1
        self.keys = np.repeat(np.arange(bundle.user_count, dtype=np.int64), self.counts) * self.stride + self.flat
        self.item_count = bundle.item_count
        self.flat_users = np.repeat(np.arange(bundle.user_count, dtype=np.int64), self.counts)

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        key = users * self.stride + items
        idx = np.searchsorted(self.keys, key)
        idx = np.minimum(idx, len(self.keys) - 1)
        return self.keys[idx] == key

    def locate(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Index of each (user, item) within its user's segment; -1 if absent."""
        key = users * self.stride + items
        idx = np.searchsorted(self.keys, key)
        idx_c = np.minimum(idx, len(self.keys) - 1)
        local = np.where(self.keys[idx_c] == key, idx_c - self.offsets[users], -1)
        return local


def positive_index(bundle: SplitBundle) -> _PositiveIndex:
    cache = getattr(bundle, _CSR_ATTR, None)
    if cache is None:
        cache = _PositiveIndex(bundle)
        object.__setattr__(bundle, _CSR_ATTR, cache)
    return cache


@dataclass
class EnrichedInteraction:
    """One training unit: a user with M positive and N negative item ids."""

    user: int
    positives: np.ndarray  # int64 (M,)
    negatives: np.ndarray  # int64 (N,)

    @property
    def m(self) -> int:
        return int(self.positives.shape[0])

    @property
    def n(self) -> int:
        return int(self.negatives.shape[0])


def _collides_with_lower_slot(arr: np.ndarray) -> np.ndarray:
    """Mark entries equal to some lower-indexed entry of their row.

    Redrawing exactly these emulates drawing the slots one at a time with
    rejection, which keeps the accepted tuple uniform without replacement.
    """
    if arr.shape[1] < 2:
        return np.zeros(arr.shape, dtype=bool)
    order = np.argsort(arr, axis=1, kind="stable")  # stable: equal values keep slot order
    svals = np.take_along_axis(arr, order, axis=1)
    dup_sorted = np.zeros(arr.shape, dtype=bool)
    dup_sorted[:, 1:] = svals[:, 1:] == svals[:, :-1]
    dup = np.zeros(arr.shape, dtype=bool)
    np.put_along_axis(dup, order, dup_sorted, axis=1)
    return dup


def sample_bags_bulk(
    users: np.ndarray,
    bundle: SplitBundle,
    m: int,
    n: int,
    rng: np.random.Generator,
    anchors: np.ndarray | None = None,
    max_rounds: int = 1000,
):
    """Sample one bag per entry of `users`; returns (positives (B, M), negatives (B, N)).

    Positives are uniform without replacement when the user has at least M
    training positives (with replacement otherwise); a given anchor occupies
    slot 0. Negatives are uniform without replacement over the complement of
    the user's training positives, by whole-row rejection.
    """
    if m < 1 or n < 1:
        raise ValueError(f"M and N must be >= 1, got M={m}, N={n}")
    users = np.asarray(users, dtype=np.int64)
    b = len(users)
    index = positive_index(bundle)
    if np.any((users < 0) | (users >= bundle.user_count)):
        raise ValueError("user id out of range")
    counts = index.counts[users]
    if np.any(counts == 0):
        missing = int(users[np.argmax(counts == 0)])
        raise ValueError(f"user {missing} has no training positives")
    if np.any(n >= bundle.item_count - counts):
        bad = int(users[np.argmax(n >= bundle.item_count - counts)])
        raise ValueError(
            f"N={n} leaves no slack among {bundle.item_count - index.counts[bad]} eligible negatives for user {bad}"
        )

    offsets = index.offsets[users]
    positives = np.empty((b, m), dtype=np.int64)

    if anchors is not None:
        anchors = np.asarray(anchors, dtype=np.int64)
        anchor_local = index.locate(users, anchors)
        if np.any(anchor_local < 0):
            bad = int(np.argmax(anchor_local < 0))
            raise ValueError(f"anchor {int(anchors[bad])} is not a training positive of user {int(users[bad])}")
        positives[:, 0] = anchors
        extra = m - 1
        skip = anchor_local
        pool = counts - 1  # anchor excluded when sampling without replacement
    else:
        extra = m
        skip = None
        pool = counts

    if extra > 0:
        with_repl = counts < m
        draws = np.empty((b, extra), dtype=np.int64)
        # with-replacement rows draw directly from the full segment
        if np.any(with_repl):
            rows = np.nonzero(with_repl)[0]
            draws[rows] = (rng.random((len(rows), extra)) * counts[rows, None]).astype(np.int64)
        rows = np.nonzero(~with_repl)[0]
        if len(rows):
            room = pool[rows, None]
            picked = (rng.random((len(rows), extra)) * room).astype(np.int64)
            if skip is not None:
                picked += picked >= skip[rows, None]
            bad = _collides_with_lower_slot(picked)
            rounds = 0
            while np.any(bad):
                rounds += 1
                if rounds > max_rounds:
                    raise RuntimeError("positive sampling failed to find distinct items")
                redo_rows, redo_cols = np.nonzero(bad)
                fresh = (rng.random(len(redo_rows)) * pool[rows[redo_rows]]).astype(np.int64)
                if skip is not None:
                    fresh += fresh >= skip[rows[redo_rows]]
                picked[redo_rows, redo_cols] = fresh
                bad = _collides_with_lower_slot(picked)
            draws[rows] = picked
        positives[:, m - extra :] = index.flat[offsets[:, None] + draws]

    negatives = np.empty((b, n), dtype=np.int64)
    eligible = bundle.item_count - counts
    dense = eligible < 4 * n
    for r in np.nonzero(dense)[0]:  # rare dense users: sample the complement exactly
        u = int(users[r])
        segment = index.flat[index.offsets[u] : index.offsets[u + 1]]
        complement = np.setdiff1d(np.arange(bundle.item_count, dtype=np.int64), segment, assume_unique=True)
        negatives[r] = complement[rng.choice(len(complement), size=n, replace=False)]
    rows = np.nonzero(~dense)[0]
    if len(rows):
        cand = (rng.random((len(rows), n)) * bundle.item_count).astype(np.int64)
        row_users = users[rows]
        bad = index.contains(np.repeat(row_users, n), cand.reshape(-1)).reshape(len(rows), n)
        bad |= _collides_with_lower_slot(cand)
        rounds = 0
        while np.any(bad):
            rounds += 1
            if rounds > max_rounds:
                raise RuntimeError("negative sampling failed; catalog too small for N distinct negatives")
            redo_rows, redo_cols = np.nonzero(bad)
            fresh = (rng.random(len(redo_rows)) * bundle.item_count).astype(np.int64)
            cand[redo_rows, redo_cols] = fresh
            bad = index.contains(np.repeat(row_users, n), cand.reshape(-1)).reshape(len(rows), n)
            bad |= _collides_with_lower_slot(cand)
        negatives[rows] = cand
    return positives, negatives


def sample_bag(
    user: int,
    bundle: SplitBundle,
    m: int,
    n: int,
    rng: np.random.Generator,
    anchor: int | None = None,
) -> EnrichedInteraction:
    """Draw one enriched interaction for `user` (see sample_bags_bulk)."""
    users = np.array([user], dtype=np.int64)
    anchors = None if anchor is None else np.array([anchor], dtype=np.int64)
    positives, negatives = sample_bags_bulk(users, bundle, m, n, rng, anchors=anchors)
    return EnrichedInteraction(user=int(user), positives=positives[0], negatives=negatives[0])


def epoch_schedule(bundle: SplitBundle, rng: np.random.Generator):
    """Shuffled (user, anchor positive) stream covering each training positive once.

    Returns parallel int64 arrays (users, anchors) of length equal to the
    total number of training positives.
    """
    index = positive_index(bundle)
    perm = rng.permutation(len(index.flat))
    return index.flat_users[perm], index.flat[perm]
