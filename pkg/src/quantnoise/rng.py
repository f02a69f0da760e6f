"""Deterministic, splittable random streams for reproducible experiments.

Generator choice (fixed for results-format version 1, do not change):

* Bit source: Philox-4x64-10 counter-based generator (numpy's
  implementation), keyed by the 128-bit word ``stream_id << 64 | seed``.
  Distinct ``(seed, stream_id)`` pairs select distinct keys and therefore
  non-overlapping, statistically independent sequences by construction.
* Each draw call occupies its own 2^128-state counter block (the call
  counter is placed in the third 64-bit counter word), so a stream can be
  replayed bit-identically from any ``(seed, stream_id, counter)`` triple
  and calls never overlap regardless of how many values each one consumed.
* Normal samples use the inverse-CDF transform ``ndtri`` applied to
  ``u = (raw >> 11 + 0.5) * 2^-53`` (u in (0,1), never hitting 0 or 1).
  Inverse-CDF rather than ziggurat/Box-Muller keeps the mapping
  one-draw-per-sample, which makes counter accounting exact.

Stream ids are derived by ``mix64``, a SplitMix64 chain over integer words.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from quantnoise.errors import ConfigError

_MASK64 = (1 << 64) - 1

# Purpose tags mixed into derived stream ids. Never reuse values.
TAG_INIT = 0x01
TAG_SHUFFLE = 0x02
TAG_TRAIN_NOISE = 0x03
TAG_EVAL_NOISE = 0x04
TAG_DROPOUT = 0x05
TAG_SUBSET = 0x06
TAG_MONITOR_NOISE = 0x07
TAG_WEIGHT_NOISE = 0x08
TAG_RETRAIN = 0x09


def mix64(*words: int) -> int:
    """Mix integer words into one 64-bit value (SplitMix64 finalizer chain).

    Deterministic and fixed: used to derive stream ids from structured
    coordinates such as (tag, sigma index, repeat index, site index).
    """
    acc = 0
    for w in words:
        acc = (acc + 0x9E3779B97F4A7C15 + (int(w) & _MASK64)) & _MASK64
        z = acc
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = z ^ (z >> 31)
    return acc


class RngStream:
    """One reproducible random stream addressed by (seed, stream_id, counter).

    The counter counts *calls*, not samples; replaying a stream from the
    same triple reproduces the exact same bits.
    """

    __slots__ = ("seed", "stream_id", "counter")

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = int(counter)

    def derive(self, *words: int) -> "RngStream":
        """Child stream with an id mixed from this stream's id and `words`."""
        return RngStream(self.seed, mix64(self.stream_id, *words))

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def _raw(self, n: int) -> np.ndarray:
        """Next `n` raw uint64 words; advances the call counter by one."""
        key = (self.stream_id << 64) | self.seed
        block = self.counter << 128
        bg = np.random.Philox(counter=block, key=key)
        self.counter += 1
        return bg.random_raw(n)

    def uniform(self, shape) -> np.ndarray:
        """Uniform float64 samples in the open interval (0, 1)."""
        n = int(np.prod(shape)) if shape else 1
        raw = self._raw(n)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0,
                 dtype=np.float32) -> np.ndarray:
        """I.i.d. normal samples via inverse CDF; std == 0 returns `mean`."""
        if std < 0:
            raise ConfigError(f"gaussian std must be >= 0, got {std}")
        u = self.uniform(shape)
        z = ndtri(u)
        return np.asarray(mean + std * z, dtype=dtype)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """`n` integers in [0, bound) by modulo reduction.

        Modulo bias is < bound/2^64; negligible for bound up to 2^32.
        """
        if bound <= 0:
            raise ConfigError(f"integers bound must be positive, got {bound}")
        return (self._raw(n) % np.uint64(bound)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): argsort of raw 64-bit keys."""
        keys = self._raw(n)
        return np.argsort(keys, kind="stable")

    def __repr__(self) -> str:
        return (f"RngStream(seed={self.seed}, stream_id={self.stream_id}, "
                f"counter={self.counter})")
