# app/linalg.py
"""
Dense float64 linear algebra and counter-based random streams.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
The helpers here add the contracts the rest of the package relies on:
shape-checked products, finiteness checks and reproducible streams.

Random streams use numpy's Philox (a counter-based generator) keyed by a
``SeedSequence(seed, spawn_key=stream_key)``. Normal variates come from
``Generator.standard_normal`` (numpy's ziggurat), so a given
(seed, stream key, call order) always yields the same numbers for a fixed
numpy version.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from core.exceptions import ArgumentError, NonFiniteError, ShapeError

DTYPE = np.float64


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array (copy only if needed)."""
    arr = np.asarray(values, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", shape=arr.shape)
    return arr


def check_finite(arr: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul operands do not conform", left=a.shape, right=b.shape)
    return check_finite(a @ b, "matmul")


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} operands differ in shape", left=a.shape, right=b.shape)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "add")
    return check_finite(a + b, "add")


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b, "hadamard")
    return check_finite(a * b, "hadamard")


def scale(a: np.ndarray, factor: float) -> np.ndarray:
    return check_finite(a * factor, "scale")


# ─── Random streams ───────────────────────────────────────────────────────────

def _key_part(part: int | str) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ArgumentError("stream key parts must be non-negative", part=int(part))
        return int(part)
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """
    A reproducible random stream identified by (seed, stream key).

    ``stream`` may be an int or a tuple of ints/strings; strings are hashed,
    so ``RngStream(7, ("train", 3, 1))`` names the stream of couple 1 in
    generation 3. Distinct keys give independent Philox streams.
    The stream is exclusively owned by one worker; pass children, not the
    parent, across processes.
    """

    __slots__ = ("seed", "key", "_gen")

    def __init__(self, seed: int, stream: int | str | Sequence[int | str] = 0) -> None:
        if seed < 0:
            raise ArgumentError("seed must be non-negative", seed=seed)
        parts = stream if isinstance(stream, (tuple, list)) else (stream,)
        self.seed = int(seed)
        self.key: tuple[int, ...] = tuple(_key_part(p) for p in parts)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *parts: int | str) -> "RngStream":
        """Independent sub-stream keyed below this one (does not consume state)."""
        return RngStream(self.seed, self.key + tuple(_key_part(p) for p in parts))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def standard_normal(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.standard_normal((rows, cols), dtype=DTYPE)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"


def sample_standard_normal(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """i.i.d. N(0, 1) matrix of shape (rows, cols) drawn from ``rng``."""
    if rows < 1 or cols < 1:
        raise ArgumentError("rows and cols must be >= 1", rows=rows, cols=cols)
    return rng.standard_normal(rows, cols)


def derive_seed(master_seed: int, *parts: int | str) -> int:
    """Stable 63-bit seed from a master seed and labels (e.g. repetition index)."""
    text = ":".join([str(master_seed), *map(str, parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
