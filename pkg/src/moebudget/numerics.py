"""Deterministic numeric primitives shared by every module.

All arithmetic is 64-bit float. Ties in every ranking operation are broken
toward the lower index so that repeated runs (and runs split across workers)
produce identical results.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = ["Rng", "softmax", "top_k_indices"]

_scratch_store = threading.local()


def scratch(name: str, *shape: int) -> np.ndarray:
    """Reusable uninitialized buffer for hot-path intermediates.

    Freshly mapped multi-hundred-KB temporaries pay page-fault costs that
    dwarf the arithmetic on them, so frequently-executed code routes its
    large intermediates through named per-thread buffers instead. Each call
    site owns a distinct ``name``; the returned view is invalidated by the
    next request for the same name.
    """
    bufs = getattr(_scratch_store, "bufs", None)
    if bufs is None:
        bufs = _scratch_store.bufs = {}
    need = 1
    for s in shape:
        need *= int(s)
    buf = bufs.get(name)
    if buf is None or buf.size < need:
        buf = bufs[name] = np.empty(max(need, 2 * (buf.size if buf is not None else 0)))
    return buf[:need].reshape(shape)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction) along ``axis``.

    Raises ``ValueError`` on empty or non-finite input.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax requires at least one logit")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the entries where ``mask`` is True; masked
    entries get probability 0. Every row must have at least one allowed entry.
    """
    neg = np.where(mask, scores, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, ordered by
    descending score; equal scores rank by ascending index.

    Works on 1-D score vectors and on row batches alike.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = s.shape[-1]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds number of scores {n}")
    # Stable sort of the negated scores keeps original (ascending) index
    # order among ties, which is exactly the fixed tie rule.
    order = np.argsort(-s, axis=-1, kind="stable")
    return order[..., :k]


class Rng:
    """Seeded, splittable random stream backed by the Philox counter-based
    bit generator.

    The stream is identified by ``(seed, path)``: equal identifiers produce
    bit-identical output on every platform, and distinct substream paths are
    statistically independent, so parallel sweeps can draw from substreams
    keyed by cell identity instead of execution order.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def substream(self, *indices: int) -> "Rng":
        """Independent child stream addressed by ``indices``."""
        return Rng(self.seed, self.path + indices)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Rng(seed={self.seed}, path={self.path})"
