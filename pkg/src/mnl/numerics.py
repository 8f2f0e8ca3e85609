"""Stable softmax / cross-entropy / KL kernels and reproducible random streams.

Every kernel works on the last axis, so a 1-D array is a single vector and a
2-D array is a batch of row vectors.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

PROB_FLOOR = 1e-12


class NonFiniteError(ValueError):
    """Raised when an input that must be finite holds inf or NaN."""


def _check_finite(z: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(z)):
        raise NonFiniteError(f"{name} contains non-finite entries")


def softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z, "log_softmax input")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, y):
    """-log softmax(logits)[y] via log-sum-exp.

    Scalar for a single vector, a per-row array for a batch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y)
    C = logits.shape[-1]
    if np.any(y < 0) or np.any(y >= C):
        raise ValueError(f"class index out of range for {C} classes")
    lsm = log_softmax(logits)
    if logits.ndim == 1:
        return float(-lsm[int(y)])
    return -np.take_along_axis(lsm, y.reshape(-1, 1).astype(np.intp), axis=-1)[:, 0]


def kl_divergence(p, q):
    """KL(p || q) with 0*log(0/q) = 0 and q floored at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    qc = np.maximum(q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(qc)), 0.0)
    # tiny negative sums from rounding are clipped; KL is nonnegative
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def _derive_id(parent: int, tag: str) -> int:
    h = hashlib.blake2b(struct.pack("<Q", parent) + tag.encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so identical keys replay the same draws on any platform.
    Child streams get ``stream_id = hash(parent_id, tag)``.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be unsigned")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(key=[self.seed, self.stream_id])
        self.gen = np.random.Generator(bitgen)

    def child(self, tag: str) -> "RngStream":
        return RngStream(self.seed, _derive_id(self.stream_id, tag))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    # thin pass-throughs so callers need not reach into .gen
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)
