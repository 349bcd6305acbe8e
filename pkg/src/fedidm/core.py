"""Numerical primitives shared across the package.

Everything runs in float64. Reductions over clients always iterate in client
index order so that runs are bitwise reproducible.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

Rng = np.random.Generator


class DegenerateDirection(ValueError):
    """Raised when a direction is requested for a zero-norm vector."""

    def __init__(self, msg: str = "degenerate direction"):
        super().__init__(msg)


def make_rng(seed: int, *keys: int) -> Rng:
    """Counter-based generator (Philox) keyed by ``seed`` and optional sub-keys.

    Sub-keys give independent, order-free streams, e.g. ``make_rng(seed, round, client)``.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def as_vec(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def norm(v) -> float:
    return float(np.sqrt(np.dot(v, v)))


def cosine_similarity(a, b) -> float:
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = norm(a), norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateDirection()
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def l2_normalize(v) -> np.ndarray:
    v = as_vec(v)
    n = norm(v)
    if n == 0.0:
        raise DegenerateDirection()
    return v / n


def median_scalar(xs: Sequence[float]) -> float:
    vals = sorted(float(x) for x in xs)
    if not vals:
        raise ValueError("median of an empty sequence")
    mid = len(vals) // 2
    if len(vals) % 2:
        return vals[mid]
    return 0.5 * (vals[mid - 1] + vals[mid])


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax of non-finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


# Acklam's rational approximation for the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def inv_normal_cdf(p: float) -> float:
    """Quantile of the standard normal, accurate to well below 1e-8 in probability."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"inv_normal_cdf needs 0 < p < 1, got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    # One Newton step on cdf(x) - p; squares the ~1e-9 approximation error.
    e = normal_cdf(x) - p
    return x - e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
