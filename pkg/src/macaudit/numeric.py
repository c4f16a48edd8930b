"""Dense float64 helpers and the seeded random stream used across the package.

Matrices are plain 2-D ``numpy.float64`` arrays. The random stream wraps
numpy's Philox generator, a counter-based bit generator whose output for a
given key is fixed across platforms and numpy versions. Child streams are keyed
by hashing the parent key together with a text label, so the sequence a
component sees depends only on the root seed and the label path, never on how
many draws other components made.
"""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    m = np.asarray(values, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    >>> matmul([[1, 2], [3, 4]], [[5], [6]]).tolist()
    [[17.0], [39.0]]
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def argmax_rows(m) -> np.ndarray:
    """Column index of the row maximum; ties go to the lowest index."""
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"argmax_rows needs a non-empty 2-D matrix, got shape {m.shape}")
    # np.argmax returns the first occurrence of the maximum.
    return np.argmax(m, axis=1)


def _derive_key(seed: int, label: str) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(16, "little", signed=False))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Deterministic random stream keyed by a 64-bit seed.

    A single stream is not safe to share between threads; call :meth:`split`
    to hand each worker its own child.
    """

    def __init__(self, seed: int, _key: int | None = None):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self._key = _derive_key(seed, "root") if _key is None else _key
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def split(self, label: str) -> "RngStream":
        """Child stream determined only by this stream's key and ``label``."""
        return RngStream(self.seed, _key=_derive_key(self._key, str(label)))

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size, dtype=DTYPE)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def keep_mask(self, shape, p_drop: float) -> np.ndarray:
        """Boolean mask where each entry is kept with probability ``1 - p_drop``.

        Masks are the bulk of all random numbers consumed, so they are drawn as
        16-bit integers; ``p_drop`` is resolved to a multiple of 2**-16 (exact
        for 0.5).
        """
        if p_drop <= 0.0:
            return np.ones(shape, dtype=bool)
        threshold = int(round(p_drop * 65536))
        return self._gen.integers(0, 65536, size=shape, dtype=np.uint16) >= threshold
