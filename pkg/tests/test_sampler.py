import numpy as np
import pytest
from scipy.stats import chisquare

from varbpr.sampler import epoch_schedule, sample_bag


class TestSampleBag:
    def test_degenerate_pair(self, toy_bundle):
        rng = np.random.default_rng(0)
        bag = sample_bag(0, toy_bundle, 1, 1, rng)
        assert bag.m == bag.n == 1
        assert bag.positives[0] in toy_bundle.train_positives[0]
        assert bag.negatives[0] not in toy_bundle.train_positives[0]

    def test_with_replacement_fallback(self, toy_bundle):
        rng = np.random.default_rng(1)
        bag = sample_bag(0, toy_bundle, 4, 1, rng)  # user 0 has 3 positives < 4
        assert bag.m == 4
        assert set(bag.positives.tolist()) <= set(toy_bundle.train_positives[0].tolist())

    def test_distinct_positives_when_enough(self, toy_bundle):
        rng = np.random.default_rng(2)
        for _ in range(50):
            bag = sample_bag(0, toy_bundle, 3, 2, rng)
            assert len(set(bag.positives.tolist())) == 3

    def test_negatives_distinct_and_eligible(self, toy_bundle):
        rng = np.random.default_rng(3)
        for _ in range(100):
            bag = sample_bag(1, toy_bundle, 2, 2, rng)
            assert len(set(bag.negatives.tolist())) == 2
            for j in bag.negatives:
                assert j not in toy_bundle.train_positives[1]

    def test_anchor_pinned_first(self, toy_bundle):
        rng = np.random.default_rng(4)
        for anchor in toy_bundle.train_positives[2]:
            bag = sample_bag(2, toy_bundle, 3, 1, rng, anchor=int(anchor))
            assert bag.positives[0] == anchor

    def test_anchor_must_be_positive(self, toy_bundle):
        rng = np.random.default_rng(5)
        with pytest.raises(ValueError):
            sample_bag(0, toy_bundle, 2, 1, rng, anchor=5)

    def test_too_many_negatives_rejected(self, toy_bundle):
        rng = np.random.default_rng(6)
        # user 0 has 3 positives in a 6-item catalog -> 3 eligible negatives
        with pytest.raises(ValueError):
            sample_bag(0, toy_bundle, 1, 3, rng)

    def test_bad_sizes_rejected(self, toy_bundle):
        rng = np.random.default_rng(7)
        with pytest.raises(ValueError):
            sample_bag(0, toy_bundle, 0, 1, rng)
        with pytest.raises(ValueError):
            sample_bag(0, toy_bundle, 1, 0, rng)

    def test_unknown_user_rejected(self, toy_bundle):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError):
            sample_bag(17, toy_bundle, 1, 1, rng)

    def test_negative_uniformity_chisquare(self, toy_bundle):
        # user 0: eligible negatives are items {3, 4, 5}
        rng = np.random.default_rng(9)
        counts = {3: 0, 4: 0, 5: 0}
        draws = 100_000
        for _ in range(draws):
            bag = sample_bag(0, toy_bundle, 1, 1, rng)
            counts[int(bag.negatives[0])] += 1
        observed = np.array([counts[3], counts[4], counts[5]])
        # each count within 5 sigma of the binomial expectation
        p = 1 / 3
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(observed - draws * p) < 5 * sigma)
        _, pval = chisquare(observed)
        assert pval > 0.01

    def test_reproducible_with_seed(self, toy_bundle):
        a = [sample_bag(0, toy_bundle, 2, 2, np.random.default_rng(42)) for _ in range(1)]
        b = [sample_bag(0, toy_bundle, 2, 2, np.random.default_rng(42)) for _ in range(1)]
        np.testing.assert_array_equal(a[0].positives, b[0].positives)
        np.testing.assert_array_equal(a[0].negatives, b[0].negatives)


class TestEpochSchedule:
    def test_covers_each_positive_once(self, toy_bundle):
        users, anchors = epoch_schedule(toy_bundle, np.random.default_rng(0))
        assert len(users) == toy_bundle.total_train_positives
        seen = {}
        for u, a in zip(users, anchors):
            seen.setdefault(int(u), []).append(int(a))
        for u, items in toy_bundle.train_positives.items():
            assert sorted(seen[u]) == sorted(items.tolist())

    def test_same_seed_same_order(self, toy_bundle):
        u1, a1 = epoch_schedule(toy_bundle, np.random.default_rng(5))
        u2, a2 = epoch_schedule(toy_bundle, np.random.default_rng(5))
        np.testing.assert_array_equal(u1, u2)
        np.testing.assert_array_equal(a1, a2)

    def test_order_is_shuffled(self, ml100k_bundle):
        users, _ = epoch_schedule(ml100k_bundle, np.random.default_rng(1))
        # a sorted stream would have non-decreasing users throughout
        assert np.any(np.diff(users) < 0)

    def test_full_epoch_reproducible_bags(self, toy_bundle):
        def run(seed):
            rng = np.random.default_rng(seed)
            users, anchors = epoch_schedule(toy_bundle, rng)
            return [sample_bag(int(u), toy_bundle, 2, 2, rng, anchor=int(a)) for u, a in zip(users, anchors)]

        for x, y in zip(run(3), run(3)):
            assert x.user == y.user
            np.testing.assert_array_equal(x.positives, y.positives)
            np.testing.assert_array_equal(x.negatives, y.negatives)

    def test_no_sampled_negative_is_train_positive_full_epoch(self, ml100k_bundle):
        rng = np.random.default_rng(2)
        users, anchors = epoch_schedule(ml100k_bundle, rng)
        stride = max(1, len(users) // 2000)  # spot-check a deterministic slice
        for idx in range(0, len(users), stride):
            u = int(users[idx])
            bag = sample_bag(u, ml100k_bundle, 4, 4, rng, anchor=int(anchors[idx]))
            assert not np.any(np.isin(bag.negatives, ml100k_bundle.train_positives[u]))
