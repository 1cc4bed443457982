"""Ranking and exposure metrics plus the diagnostic probes.

Everything reads a frozen model snapshot and is a pure function of
(model, bundle, seed): repeated evaluation is bit-identical. The evaluation
stage honours the VARBPR_EVAL_THREADS environment variable (default 1) for
chunked user scoring; aggregation always happens in fixed user order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from .dataio import SignalBuffer, SplitBundle
from .inference import InferenceConfig, PosteriorPair, prior_weights, hardness_scores, signal_prior, solve_posteriors
from .mathcore import kl_divergence, log_sigmoid, sigmoid
from .sampler import EnrichedInteraction, epoch_schedule, sample_bag

THREADS_ENV = "VARBPR_EVAL_THREADS"

#: Numeric slack on the exact Jensen inequalities.
GAP_TOL = 1e-12

#: Smoothing floor added to pooled posterior mass before renormalization.
POOL_FLOOR = 1e-12


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class EvalSettings:
    k: int = 20
    eval_every: int = 1
    probe_bags: int = 2048
    likelihood_samples: int = 100

    def validate(self) -> "EvalSettings":
        if self.k < 1 or self.eval_every < 1 or self.probe_bags < 0 or self.likelihood_samples < 1:
            raise ValueError("k, eval_every, likelihood_samples must be >= 1 and probe_bags >= 0")
        return self


@dataclass
class DiagnosticsRow:
    """One evaluation point; serializes as one epochs.csv row (fixed header)."""

    epoch: int
    loss: float
    recall_k: float
    ndcg_k: float
    aplt_k: float
    likelihood: float
    jensen_gap_mean: float
    jensen_gap_max: float
    margin_var_mean: float
    kl_bag_pos: float
    kl_bag_neg: float
    kl_global_pos: float
    kl_global_neg: float

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_csv(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(str(v) if f.name == "epoch" else repr(float(v)))
        return out

    def validate(self) -> "DiagnosticsRow":
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValueError(f"diagnostics field {f.name} is not finite")
        return self


# ---------------------------------------------------------------------------
# Top-K ranking and metrics


def rank_topk(model, bundle: SplitBundle, k: int, users: list[int] | None = None) -> dict[int, np.ndarray]:
    """Exact full-catalog top-k per user, training positives excluded.

    Ties break by ascending item id. Returns {user: int64 array of length
    min(k, eligible items)}.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if users is None:
        users = bundle.active_users
    users = list(users)
    item_f = model.item_factors

    def _rank_chunk(chunk: list[int]) -> list[np.ndarray]:
        scores = model.user_factors[np.array(chunk, dtype=np.int64)] @ item_f.T
        out = []
        for row, u in enumerate(chunk):
            s = scores[row]
            s[bundle.train_positives[u]] = -np.inf
            order = np.argsort(-s, axis=-1, kind="stable")  # stable: ties keep ascending id
            n_eligible = item_f.shape[0] - len(bundle.train_positives[u])
            out.append(order[: min(k, n_eligible)].astype(np.int64))
        return out

    chunk_size = 256
    chunks = [users[i : i + chunk_size] for i in range(0, len(users), chunk_size)]
    threads = _thread_count()
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_rank_chunk, chunks))
    else:
        results = [_rank_chunk(c) for c in chunks]
    lists: dict[int, np.ndarray] = {}
    for chunk, ranked in zip(chunks, results):
        for u, arr in zip(chunk, ranked):
            lists[u] = arr
    return lists


def recall_at_k(lists: dict[int, np.ndarray], test_positives: dict[int, np.ndarray]) -> float:
    """Mean over users with non-empty test sets of |hits| / |test set|."""
    vals = []
    for u, ranked in lists.items():
        test = test_positives.get(u)
        if test is None or len(test) == 0:
            continue
        hits = np.isin(ranked, test).sum()
        vals.append(hits / len(test))
    return float(np.mean(vals)) if vals else 0.0


def ndcg_at_k(lists: dict[int, np.ndarray], test_positives: dict[int, np.ndarray]) -> float:
    """Binary-relevance NDCG with 1/log2(rank+1) discount and truncated ideal."""
    vals = []
    for u, ranked in lists.items():
        test = test_positives.get(u)
        if test is None or len(test) == 0:
            continue
        hit_ranks = np.nonzero(np.isin(ranked, test))[0] + 1
        dcg = float(np.sum(1.0 / np.log2(hit_ranks + 1.0)))
        ideal = np.arange(1, min(len(test), len(ranked)) + 1)
        idcg = float(np.sum(1.0 / np.log2(ideal + 1.0)))
        vals.append(dcg / idcg)
    return float(np.mean(vals)) if vals else 0.0


def aplt_at_k(lists: dict[int, np.ndarray], signals: SignalBuffer) -> float:
    """Mean fraction of long-tail items in the top-k lists."""
    vals = [float(signals.long_tail_mask[ranked].mean()) for ranked in lists.values() if len(ranked)]
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# Likelihood probe


@dataclass
class LikelihoodResult:
    mean: float  # mean sigmoid(margin) over sampled triplets
    log_mean: float  # mean ln sigmoid(margin)
    triplets: int


def likelihood_probe(model, bundle: SplitBundle, samples_per_user: int, rng: np.random.Generator) -> LikelihoodResult:
    """Held-out pairwise likelihood under the sigmoid model.

    For each user with test positives, samples `samples_per_user` triplets
    (uniform test positive, uniform un-interacted item excluding train and
    test positives) and averages sigmoid(score difference) over all triplets.
    """
    if samples_per_user < 1:
        raise ValueError("samples_per_user must be >= 1")
    total_sig = 0.0
    total_log = 0.0
    count = 0
    n_items = model.item_factors.shape[0]
    for u in bundle.active_users:
        test = bundle.test_positives.get(u)
        if test is None or len(test) == 0:
            continue
        excluded = np.union1d(bundle.train_positives[u], test)
        if len(excluded) >= n_items:
            continue
        scores = model.user_factors[u] @ model.item_factors.T
        pos_items = test[rng.integers(0, len(test), size=samples_per_user)]
        neg_items = np.empty(samples_per_user, dtype=np.int64)
        filled = 0
        while filled < samples_per_user:
            draw = rng.integers(0, n_items, size=2 * (samples_per_user - filled) + 8)
            idx = np.minimum(np.searchsorted(excluded, draw), len(excluded) - 1)
            ok = excluded[idx] != draw
            take = draw[ok][: samples_per_user - filled]
            neg_items[filled : filled + len(take)] = take
            filled += len(take)
        margins = scores[pos_items] - scores[neg_items]
        total_sig += float(np.sum(sigmoid(margins)))
        total_log += float(np.sum(log_sigmoid(margins)))
        count += samples_per_user
    if count == 0:
        raise ValueError("likelihood probe requires at least one user with test positives")
    return LikelihoodResult(mean=total_sig / count, log_mean=total_log / count, triplets=count)


# ---------------------------------------------------------------------------
# Probe-bag helpers


def sample_probe_bags(
    bundle: SplitBundle, m: int, n: int, count: int, rng: np.random.Generator
) -> list[EnrichedInteraction]:
    """Sample `count` bags with anchors drawn uniformly over training positives."""
    from .sampler import positive_index, sample_bags_bulk

    index = positive_index(bundle)
    picks = rng.integers(0, len(index.flat), size=count)
    users = index.flat_users[picks]
    anchors = index.flat[picks]
    positives, negatives = sample_bags_bulk(users, bundle, m, n, rng, anchors=anchors)
    return [
        EnrichedInteraction(user=int(users[i]), positives=positives[i], negatives=negatives[i])
        for i in range(count)
    ]


def _stack_bags(model, bags: list[EnrichedInteraction], signals: SignalBuffer, cfg: InferenceConfig, uniform: bool):
    """Batched scores, priors, and posteriors for bags sharing one (M, N) shape."""
    m, n = bags[0].m, bags[0].n
    if any(bag.m != m or bag.n != n for bag in bags):
        raise ValueError("probe bags must share one (M, N) shape")
    users = np.fromiter((bag.user for bag in bags), dtype=np.int64, count=len(bags))
    pos_idx = np.stack([bag.positives for bag in bags])
    neg_idx = np.stack([bag.negatives for bag in bags])
    uvecs = model.user_factors[users]
    spos = np.einsum("bd,bmd->bm", uvecs, model.item_factors[pos_idx])
    sneg = np.einsum("bd,bnd->bn", uvecs, model.item_factors[neg_idx])
    prior = signal_prior(pos_idx, neg_idx, spos, sneg, signals, cfg)
    if uniform:
        post = PosteriorPair(np.full((len(bags), m), 1.0 / m), np.full((len(bags), n), 1.0 / n))
    else:
        post = solve_posteriors(spos, sneg, prior, cfg)
    return users, pos_idx, neg_idx, spos, sneg, prior, post


def _bag_inference(model, bag: EnrichedInteraction, signals: SignalBuffer, cfg: InferenceConfig, uniform: bool):
    """Scores, prior, and posteriors of one bag under the frozen model."""
    spos = model.item_factors[bag.positives] @ model.user_factors[bag.user]
    sneg = model.item_factors[bag.negatives] @ model.user_factors[bag.user]
    prior = signal_prior(bag.positives, bag.negatives, spos, sneg, signals, cfg)
    if uniform:
        post = PosteriorPair(np.full(bag.m, 1.0 / bag.m), np.full(bag.n, 1.0 / bag.n))
    else:
        post = solve_posteriors(spos, sneg, prior, cfg)
    return spos, sneg, prior, post


# ---------------------------------------------------------------------------
# Jensen-gap probe


@dataclass
class JensenGapResult:
    gaps: np.ndarray
    variances: np.ndarray
    mean: float
    median: float
    max: float
    violations: int  # bags where gap < 0 or gap > Var/8 (beyond GAP_TOL)


def jensen_gap_probe(
    model,
    bags: list[EnrichedInteraction],
    signals: SignalBuffer,
    cfg: InferenceConfig,
    uniform_posteriors: bool = False,
) -> JensenGapResult:
    """Per-bag compression gap ln s(E[G]) - E[ln s(G)] and margin variance.

    The expectation runs over the posterior-induced random margin; the gap is
    non-negative and bounded above by Var/8.
    """
    _, _, _, spos, sneg, _, post = _stack_bags(model, bags, signals, cfg, uniform_posteriors)
    mean_margin = np.einsum("bm,bm->b", post.alpha, spos) - np.einsum("bn,bn->b", post.beta, sneg)
    gamma = spos[:, :, None] - sneg[:, None, :]
    w = post.alpha[:, :, None] * post.beta[:, None, :]
    expected_ls = (w * log_sigmoid(gamma)).sum(axis=(1, 2))
    gaps = log_sigmoid(mean_margin) - expected_ls
    variances = (w * gamma * gamma).sum(axis=(1, 2)) - mean_margin * mean_margin
    variances = np.maximum(variances, 0.0)
    violations = int(np.sum((gaps < -GAP_TOL) | (gaps > variances / 8.0 + GAP_TOL)))
    return JensenGapResult(
        gaps=gaps,
        variances=variances,
        mean=float(gaps.mean()) if len(bags) else 0.0,
        median=float(np.median(gaps)) if len(bags) else 0.0,
        max=float(gaps.max()) if len(bags) else 0.0,
        violations=violations,
    )


# ---------------------------------------------------------------------------
# KL compliance diagnostics


def _normalized(weights: np.ndarray) -> np.ndarray:
    return weights / weights.sum()


def _user_prior(model, user: int, support: np.ndarray, side: str, signals: SignalBuffer, cfg: InferenceConfig):
    """Prior weights over a user's full positive or negative support."""
    scores = model.item_factors[support] @ model.user_factors[user]
    qual = signals.quality
    if side == "positive":
        return prior_weights(
            signals.rarity[support],
            None if qual is None else qual[support],
            hardness_scores(scores, "positive", cfg.tau),
            cfg.lambda_pos,
        )
    return prior_weights(
        signals.popularity[support],
        None if qual is None else 1.0 - qual[support],
        hardness_scores(scores, "negative", cfg.tau),
        cfg.lambda_neg,
    )


def kl_compliance_from_bags(
    model,
    bags: list[EnrichedInteraction],
    bundle: SplitBundle,
    signals: SignalBuffer,
    cfg: InferenceConfig,
    scope: str,
    uniform_posteriors: bool = False,
) -> tuple[float, float]:
    """Posterior-prior adherence, averaged per bag or pooled per user.

    Bag scope: mean KL(posterior || bag-restricted renormalized prior).
    Global scope: posterior mass pooled per user over the full positive /
    negative support (zero fill plus a smoothing floor, renormalized) against
    the user's normalized full-support prior.
    """
    if scope not in ("bag", "global"):
        raise ValueError(f"scope must be 'bag' or 'global', got {scope!r}")
    if not bags:
        raise ValueError("no bags supplied")

    users, pos_idx, neg_idx, _, _, prior, post = _stack_bags(model, bags, signals, cfg, uniform_posteriors)
    if scope == "bag":
        prior_pos = prior.pos / prior.pos.sum(axis=-1, keepdims=True)
        prior_neg = prior.neg / prior.neg.sum(axis=-1, keepdims=True)
        return float(np.mean(kl_divergence(post.alpha, prior_pos))), float(np.mean(kl_divergence(post.beta, prior_neg)))

    m, n = pos_idx.shape[1], neg_idx.shape[1]
    pooled_pos = np.zeros((bundle.user_count, bundle.item_count))
    pooled_neg = np.zeros((bundle.user_count, bundle.item_count))
    np.add.at(pooled_pos, (np.repeat(users, m), pos_idx.reshape(-1)), post.alpha.reshape(-1))
    np.add.at(pooled_neg, (np.repeat(users, n), neg_idx.reshape(-1)), post.beta.reshape(-1))
    kl_pos, kl_neg = [], []
    all_items = np.arange(bundle.item_count, dtype=np.int64)
    for user in np.unique(users):
        user = int(user)
        pos_support = bundle.train_positives[user]
        neg_support = np.setdiff1d(all_items, pos_support, assume_unique=False)
        pp = _normalized(pooled_pos[user, pos_support] + POOL_FLOOR)
        pn = _normalized(pooled_neg[user, neg_support] + POOL_FLOOR)
        prior_p = _normalized(_user_prior(model, user, pos_support, "positive", signals, cfg))
        prior_n = _normalized(_user_prior(model, user, neg_support, "negative", signals, cfg))
        kl_pos.append(kl_divergence(pp, prior_p))
        kl_neg.append(kl_divergence(pn, prior_n))
    return float(np.mean(kl_pos)), float(np.mean(kl_neg))


def kl_compliance(
    model,
    bundle: SplitBundle,
    signals: SignalBuffer,
    cfg: InferenceConfig,
    scope: str,
    m: int,
    n: int,
    rng: np.random.Generator,
    uniform_posteriors: bool = False,
) -> tuple[float, float]:
    """Compliance over one epoch's worth of bags (one bag per training positive)."""
    users, anchors = epoch_schedule(bundle, rng)
    bags = [sample_bag(int(u), bundle, m, n, rng, anchor=int(a)) for u, a in zip(users, anchors)]
    return kl_compliance_from_bags(model, bags, bundle, signals, cfg, scope, uniform_posteriors)


# ---------------------------------------------------------------------------
# Per-epoch diagnostics assembly


def compute_diagnostics(
    epoch: int,
    mean_loss: float,
    model,
    bundle: SplitBundle,
    signals: SignalBuffer,
    train_config,
    settings: EvalSettings,
    rng: np.random.Generator,
) -> DiagnosticsRow:
    """Evaluate one snapshot into a DiagnosticsRow (all probes included)."""
    lists = rank_topk(model, bundle, settings.k)
    recall = recall_at_k(lists, bundle.test_positives)
    ndcg = ndcg_at_k(lists, bundle.test_positives)
    aplt = aplt_at_k(lists, signals)
    like = likelihood_probe(model, bundle, settings.likelihood_samples, rng)
    n_bags = max(1, settings.probe_bags)
    bags = sample_probe_bags(bundle, train_config.m, train_config.n, n_bags, rng)
    uniform = train_config.loss == "bpr" or train_config.uniform_posteriors
    gap = jensen_gap_probe(model, bags, signals, train_config.inference, uniform)
    kl_bag = kl_compliance_from_bags(model, bags, bundle, signals, train_config.inference, "bag", uniform)
    kl_global = kl_compliance_from_bags(model, bags, bundle, signals, train_config.inference, "global", uniform)
    return DiagnosticsRow(
        epoch=epoch,
        loss=float(mean_loss),
        recall_k=recall,
        ndcg_k=ndcg,
        aplt_k=aplt,
        likelihood=like.mean,
        jensen_gap_mean=gap.mean,
        jensen_gap_max=gap.max,
        margin_var_mean=float(gap.variances.mean()) if len(bags) else 0.0,
        kl_bag_pos=kl_bag[0],
        kl_bag_neg=kl_bag[1],
        kl_global_pos=kl_global[0],
        kl_global_neg=kl_global[1],
    ).validate()
