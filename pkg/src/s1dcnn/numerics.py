"""Small numeric helpers: matrix-vector products, softmax and the seeded RNG.

Matrices are plain ``numpy`` arrays. Model math runs in float32; callers that
need a high-precision reference (gradient checks) pass float64 arrays and every
routine here keeps the input dtype.

Randomness always comes from :func:`make_rng`, which builds a
``numpy.random.Generator`` on the PCG64 bit generator. PCG64 output for a given
seed is fixed by numpy and identical across platforms.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

FLOAT = np.float32

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(seed))


def rng_uniform(rng: Rng, lo: float, hi: float) -> float:
    """Draw one value from ``[lo, hi)``; returns ``lo`` when the range is empty."""
    if lo > hi:
        raise ValueError(f"lo={lo} exceeds hi={hi}")
    if lo == hi:
        rng.random()  # keep the stream advancing uniformly
        return float(lo)
    return float(rng.uniform(lo, hi))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape} matrix by {v.shape} vector")
    return m @ v


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Softmax along ``axis`` with max subtraction."""
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ShapeError("softmax of an empty array")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ShapeError("log_softmax of an empty array")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
