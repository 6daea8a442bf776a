"""Counter-based random streams.

Every stochastic quantity in the package (noise draws, batch indices, scene
placements) flows through an RngStream so that a run is a pure function of its
seeds. Streams are backed by Philox4x64: output depends only on (seed, counter),
never on call history, so repeated runs and replays are bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np

_TWO_PI = 2.0 * np.pi


def _label_to_seed(seed: int, label: str) -> int:
    """Derive a child seed by hashing a label into the parent seed."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(b"/")
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


class RngStream:
    """Deterministic scalar source addressed by (seed, counter).

    The counter advances in Philox blocks (4 uint64 outputs per block); a
    partially consumed block is discarded so the next call starts on a block
    boundary. Same (seed, counter) always yields the same values.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def derive(self, label: str) -> "RngStream":
        """Independent stream for a distinct purpose, at counter zero."""
        return RngStream(_label_to_seed(self.seed, label))

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.counter)

    def _uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1); consumes ceil(n/4) blocks."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        bitgen = np.random.Philox(key=self.seed, counter=[self.counter, 0, 0, 0])
        out = np.random.Generator(bitgen).random(n, dtype=np.float64)
        self.counter += -(-n // 4)
        return out

    def uniform(self, shape) -> np.ndarray:
        """Uniform [0, 1) array of the given shape (f64)."""
        shape = _as_shape(shape)
        return self._uniforms(int(np.prod(shape, dtype=np.int64))).reshape(shape)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        """Standard normal array via Box-Muller on counter-indexed uniforms."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        if n == 0:
            return np.empty(shape, dtype=dtype)
        half = -(-n // 2)
        u = self._uniforms(2 * half)
        u1 = 1.0 - u[:half]  # (0, 1], keeps log finite
        u2 = u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * half, dtype=np.float64)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        return z[:n].reshape(shape).astype(dtype, copy=False)

    def integers(self, n: int, low: int, high: int) -> np.ndarray:
        """n ints uniform in [low, high). Range must be far below 2**53."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self._uniforms(n)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def __repr__(self):
        return f"RngStream(seed={self.seed:#x}, counter={self.counter})"


def _as_shape(shape):
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
