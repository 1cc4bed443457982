"""Bag-level priors and closed-form variational posteriors.

The exposure prior weights a bag's positives toward rare/high-quality/hard
items and its negatives toward popular/low-quality/hard items. Posteriors
are the exact maximizers of the entropy-regularized alignment objectives and
come out as softmaxes over (log prior + score / temperature), so everything
here is a pure function of bag-local data and can run on batches: all
operations treat the last axis as the bag axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .mathcore import stable_softmax

#: Floor applied to prior weights so log-space inference and KL diagnostics
#: stay finite even when a signal factor is exactly zero.
PRIOR_FLOOR = 1e-12


class PriorPair(NamedTuple):
    """Unnormalized non-negative weights over a bag's positives and negatives."""

    pos: np.ndarray
    neg: np.ndarray


class PosteriorPair(NamedTuple):
    """Simplex weights (alpha over positives, beta over negatives)."""

    alpha: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class InferenceConfig:
    """Knobs of the inference stage.

    c_pos/c_neg trade preference-driven against policy-driven inference
    (large values pull posteriors toward the prior). tau is the hardness
    softmax temperature. The lambda triples are the exponents of the
    (rarity|popularity, quality|bad-quality, hardness) prior factors.
    """

    c_pos: float = 1.0
    c_neg: float = 1.0
    tau: float = 1.0
    lambda_pos: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lambda_neg: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> "InferenceConfig":
        if not self.c_pos > 0.0:
            raise ValueError(f"c_pos must be > 0, got {self.c_pos}")
        if not self.c_neg > 0.0:
            raise ValueError(f"c_neg must be > 0, got {self.c_neg}")
        if not self.tau > 0.0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name, triple in (("lambda_pos", self.lambda_pos), ("lambda_neg", self.lambda_neg)):
            if len(triple) != 3 or any(v < 0.0 for v in triple):
                raise ValueError(f"{name} must be three non-negative reals, got {triple}")
        return self


def hardness_scores(scores, side: str, tau: float = 1.0) -> np.ndarray:
    """Softmax hardness weights of a bag from its model scores.

    Positives are hard when scored *below* the bag mean, negatives when
    scored *above* it; the mean includes the item itself.
    """
    arr = np.asarray(scores, dtype=np.float64)
    mean = arr.mean(axis=-1, keepdims=True)
    if side == "positive":
        logits = mean - arr
    elif side == "negative":
        logits = arr - mean
    else:
        raise ValueError(f"side must be 'positive' or 'negative', got {side!r}")
    return stable_softmax(logits, temperature=tau)


def prior_weights(primary, quality, hardness, exponents) -> np.ndarray:
    """Elementwise product of signal powers: primary^e1 * quality^e2 * hardness^e3.

    `quality` may be None or contain NaN where the signal is unavailable; the
    quality factor is omitted there. Entries are floored at PRIOR_FLOOR and
    deliberately left unnormalized (posterior softmax is scale invariant).
    """
    e1, e2, e3 = (float(e) for e in exponents)
    primary = np.asarray(primary, dtype=np.float64)
    out = primary**e1
    if quality is not None and e2 != 0.0:
        quality = np.asarray(quality, dtype=np.float64)
        out = out * np.where(np.isnan(quality), 1.0, quality) ** e2
    if e3 != 0.0:
        out = out * np.asarray(hardness, dtype=np.float64) ** e3
    return np.maximum(out, PRIOR_FLOOR)


def signal_prior(pos_items, neg_items, pos_scores, neg_scores, signals, cfg: InferenceConfig) -> PriorPair:
    """Prior weights from signal buffers for item index arrays of any shape.

    The scores feed the hardness factor only (computed bag-wise over the last
    axis). This is the batched kernel behind encode_prior.
    """
    qual = signals.quality
    pos = prior_weights(
        signals.rarity[pos_items],
        None if qual is None else qual[pos_items],
        hardness_scores(pos_scores, "positive", cfg.tau),
        cfg.lambda_pos,
    )
    neg = prior_weights(
        signals.popularity[neg_items],
        None if qual is None else 1.0 - qual[neg_items],
        hardness_scores(neg_scores, "negative", cfg.tau),
        cfg.lambda_neg,
    )
    return PriorPair(pos=pos, neg=neg)


def encode_prior(bag, signals, model_scores, cfg: InferenceConfig) -> PriorPair:
    """Build the (exposure, suppression) prior weights for one enriched interaction.

    `model_scores` is the (positive scores, negative scores) pair for the bag
    items under the current model.
    """
    pos_scores, neg_scores = model_scores
    return signal_prior(bag.positives, bag.negatives, pos_scores, neg_scores, signals, cfg)


def _check_prior(prior) -> np.ndarray:
    arr = np.asarray(prior, dtype=np.float64)
    if arr.shape[-1] < 1:
        raise ValueError("prior must be non-empty")
    if np.any(arr <= 0.0) or not np.all(np.isfinite(arr)):
        raise ValueError("prior entries must be strictly positive and finite")
    return arr


def posterior_positive(scores, prior, c_pos: float) -> np.ndarray:
    """Closed-form alpha: softmax of (ln prior + score / c_pos) over the bag."""
    if not c_pos > 0.0:
        raise ValueError(f"c_pos must be > 0, got {c_pos}")
    arr = np.asarray(scores, dtype=np.float64)
    parr = _check_prior(prior)
    return stable_softmax(np.log(parr) + arr / float(c_pos))


def posterior_negative(scores, prior, c_neg: float) -> np.ndarray:
    """Closed-form beta: softmax of (ln prior - score / c_neg) over the bag."""
    if not c_neg > 0.0:
        raise ValueError(f"c_neg must be > 0, got {c_neg}")
    arr = np.asarray(scores, dtype=np.float64)
    parr = _check_prior(prior)
    return stable_softmax(np.log(parr) - arr / float(c_neg))


def solve_posteriors(pos_scores, neg_scores, prior: PriorPair, cfg: InferenceConfig) -> PosteriorPair:
    """Solve both closed-form posteriors of a bag (or a batch of bags)."""
    return PosteriorPair(
        alpha=posterior_positive(pos_scores, prior.pos, cfg.c_pos),
        beta=posterior_negative(neg_scores, prior.neg, cfg.c_neg),
    )


def interest_centers(pos_vectors, neg_vectors, post: PosteriorPair):
    """Posterior-weighted convex combinations of the bag's item embeddings.

    Returns (c_plus, c_minus); supports batches with shapes
    (..., M, d) / (..., N, d) against posteriors (..., M) / (..., N).
    """
    pos_vectors = np.asarray(pos_vectors, dtype=np.float64)
    neg_vectors = np.asarray(neg_vectors, dtype=np.float64)
    c_plus = np.einsum("...m,...md->...d", post.alpha, pos_vectors)
    c_minus = np.einsum("...n,...nd->...d", post.beta, neg_vectors)
    return c_plus, c_minus
