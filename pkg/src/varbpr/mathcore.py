"""Numerically stable scalar/vector primitives shared by all modules.

All probability math runs in 64-bit floats. Simplex vectors are plain numpy
arrays whose entries are non-negative and sum to 1 within ``SIMPLEX_ATOL``.
Every function here is pure and safe to call concurrently; batched inputs
are supported by treating the last axis as the vector axis.
"""

from __future__ import annotations

import numpy as np

#: Absolute tolerance on the sum-to-one simplex invariant.
SIMPLEX_ATOL = 1e-9

LN2 = float(np.log(2.0))


def _as_finite_array(x, name: str = "input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr!r}")
    return arr


def validate_simplex(p, name: str = "vector") -> np.ndarray:
    """Check the simplex invariants (entries >= 0, rows sum to 1) and return the array.

    Accepts a single vector or a batch with the vector on the last axis.
    Raises ValueError on violation.
    """
    arr = _as_finite_array(p, name)
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise ValueError(f"{name} must have length >= 1")
    if np.any(arr < 0.0):
        raise ValueError(f"{name} has negative entries")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SIMPLEX_ATOL):
        raise ValueError(f"{name} does not sum to 1 within {SIMPLEX_ATOL}")
    return arr


def log_sigmoid(x):
    """ln(sigmoid(x)), computed as -softplus(-x) so large |x| never overflows."""
    arr = _as_finite_array(x, "x")
    out = -np.logaddexp(0.0, -arr)
    return float(out) if out.ndim == 0 else out


def sigmoid(x):
    """Standard logistic function, stable on both tails."""
    arr = _as_finite_array(x, "x")
    out = np.exp(-np.logaddexp(0.0, -arr))
    return float(out) if out.ndim == 0 else out


def maclaurin_remainder(x):
    """Error of the first-order expansion of ln(sigmoid): ln s(x) + ln 2 - x/2.

    Satisfies |result| <= x^2 / 8 everywhere.
    """
    arr = _as_finite_array(x, "x")
    out = -np.logaddexp(0.0, -arr) + LN2 - arr / 2.0
    return float(out) if out.ndim == 0 else out


def stable_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the last axis with max-subtraction, at the given temperature.

    Invariant under adding a constant to all logits. Output rows are valid
    simplex vectors.
    """
    arr = _as_finite_array(logits, "logits")
    if arr.ndim == 0 or arr.shape[-1] < 1:
        raise ValueError("logits must be non-empty")
    if not temperature > 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = arr / float(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p) -> float | np.ndarray:
    """Shannon entropy -sum p ln p over the last axis, with 0 ln 0 = 0."""
    arr = validate_simplex(p, "p")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(arr > 0.0, arr * np.log(np.where(arr > 0.0, arr, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def cross_entropy(p, q) -> float | np.ndarray:
    """Cross-entropy -sum p ln q over the last axis, with p=0 entries contributing 0.

    Raises ValueError when q vanishes somewhere p does not.
    """
    parr = validate_simplex(p, "p")
    qarr = _as_finite_array(q, "q")
    if parr.shape[-1] != qarr.shape[-1]:
        raise ValueError("p and q must have the same length")
    if np.any(qarr < 0.0):
        raise ValueError("q has negative entries")
    if np.any((qarr == 0.0) & (parr > 0.0)):
        raise ValueError("support violation: q is 0 where p > 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(parr > 0.0, parr * np.log(np.where(qarr > 0.0, qarr, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(p, q) -> float | np.ndarray:
    """KL(p || q) = sum p ln(p/q) over the last axis, with 0 ln 0 = 0.

    Both arguments must be simplex vectors of equal length and q must cover
    the support of p.
    """
    parr = validate_simplex(p, "p")
    qarr = validate_simplex(q, "q")
    if parr.shape[-1] != qarr.shape[-1]:
        raise ValueError("p and q must have the same length")
    if np.any((qarr == 0.0) & (parr > 0.0)):
        raise ValueError("support violation: q is 0 where p > 0")
    mask = parr > 0.0
    safe_p = np.where(mask, parr, 1.0)
    safe_q = np.where(mask, qarr, 1.0)
    out = (np.where(mask, parr * (np.log(safe_p) - np.log(safe_q)), 0.0)).sum(axis=-1)
    # Clamp the tiny negative residue float summation can leave on p == q.
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out
