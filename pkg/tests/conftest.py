"""Shared fixtures: datasets (real when supplied, synthetic otherwise) and toys.

Point VARBPR_ML100K at a real tab-separated u.data file to run the
absolute-value reproduction checks; without it the suite falls back to a
deterministic synthetic dataset of the same shape and skips only those
checks that assert published numbers measured on the real data.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from synth import write_ml100k_like  # noqa: E402

from varbpr.dataio import InteractionLog, SplitBundle, compute_signals, load_ratings, split_clean_test

ML100K_ENV = "VARBPR_ML100K"


@dataclass
class DatasetHandle:
    path: str
    is_real: bool


@pytest.fixture(scope="session")
def ml100k(tmp_path_factory) -> DatasetHandle:
    env_path = os.environ.get(ML100K_ENV)
    if env_path and os.path.exists(env_path):
        return DatasetHandle(path=env_path, is_real=True)
    local = os.path.join(os.path.dirname(__file__), "..", "data", "ml-100k", "u.data")
    if os.path.exists(local):
        return DatasetHandle(path=local, is_real=True)
    path = tmp_path_factory.mktemp("data") / "u.data"
    write_ml100k_like(path)
    return DatasetHandle(path=str(path), is_real=False)


@pytest.fixture(scope="session")
def ml100k_log(ml100k) -> InteractionLog:
    return load_ratings(ml100k.path, "ml100k_tab")


@pytest.fixture(scope="session")
def ml100k_bundle(ml100k_log) -> SplitBundle:
    return split_clean_test(ml100k_log, seed=7)


@pytest.fixture(scope="session")
def ml100k_signals(ml100k_bundle, ml100k_log):
    return compute_signals(ml100k_bundle, ml100k_log)


def make_toy_log() -> InteractionLog:
    """Three users, six items, hand-checkable ratings."""
    users = np.array([0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 2], dtype=np.int64)
    items = np.array([0, 1, 2, 3, 0, 2, 4, 1, 2, 3, 4, 5], dtype=np.int64)
    ratings = np.array([5, 4, 2, 4, 3, 5, 4, 1, 4, 5, 2, 4], dtype=np.float64)
    return InteractionLog(
        users=users,
        items=items,
        ratings=ratings,
        timestamps=None,
        user_raw_ids=[str(u + 1) for u in range(3)],
        item_raw_ids=[str(i + 1) for i in range(6)],
    )


@pytest.fixture
def toy_log() -> InteractionLog:
    return make_toy_log()


def make_toy_bundle() -> SplitBundle:
    train = {
        0: np.array([0, 1, 2], dtype=np.int64),
        1: np.array([0, 2, 4], dtype=np.int64),
        2: np.array([1, 2, 5], dtype=np.int64),
    }
    test = {
        0: np.array([3], dtype=np.int64),
        1: np.array([], dtype=np.int64),
        2: np.array([3, 4], dtype=np.int64),
    }
    return SplitBundle(train_positives=train, test_positives=test, user_count=3, item_count=6)


@pytest.fixture
def toy_bundle() -> SplitBundle:
    return make_toy_bundle()
