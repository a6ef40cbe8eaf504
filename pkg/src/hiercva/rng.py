"""Deterministic, splittable random streams.

A stream is identified by ``(seed, path)``. Its key is derived with
:class:`numpy.random.SeedSequence` (``spawn_key=path``) and fed to a keyed
Philox counter generator, so ``split`` is a pure function of the parent's
identity and never depends on how far the parent has been advanced.

Normals are produced by inverse-CDF on open-interval uniforms and
exponentials by ``-log(u)``: every variate consumes exactly one 64-bit
counter output, so draws stay aligned under splitting.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


class RandomStream:
    """Counter-based stream with a lineage of 64-bit split keys."""

    __slots__ = ("seed", "path", "_bitgen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(int(k) & _MASK64 for k in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        key = ss.generate_state(2, dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, path={self.path})"

    def split(self, key: int) -> "RandomStream":
        return RandomStream(self.seed, self.path + (key,))

    def uniforms(self, count: int) -> np.ndarray:
        """Uniforms on the open interval (0, 1), 53-bit resolution."""
        count = int(count)
        if count < 0:
            raise ValueError("count must be non-negative")
        if count == 0:
            return np.empty(0)
        raw = self._bitgen.random_raw(count)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53

    def normals(self, count: int) -> np.ndarray:
        return ndtri(self.uniforms(count))

    def exponentials(self, count: int) -> np.ndarray:
        return -np.log(self.uniforms(count))

    def integers(self, low: int, high: int, count: int) -> np.ndarray:
        """Integers in ``[low, high)`` via floor of uniforms (bias < 2**-40 for small ranges)."""
        u = self.uniforms(count)
        return low + np.floor(u * (high - low)).astype(np.int64)


def create_stream(seed: int) -> RandomStream:
    return RandomStream(seed)


def split(stream: RandomStream, key: int) -> RandomStream:
    return stream.split(key)


def sample_normals(stream: RandomStream, count: int) -> np.ndarray:
    return stream.normals(count)


def sample_exponentials(stream: RandomStream, count: int) -> np.ndarray:
    return stream.exponentials(count)


# Fixed lineage tags so that the pipeline's independent layers never share a stream.
OUTER = 1
DEFAULTS = 2
TWIN = 3
NESTED = 4
TRAIN = 5
TEST = 6
BOOK = 7
QR = 8
ARD = 9
