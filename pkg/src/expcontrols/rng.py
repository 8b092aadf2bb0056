"""Keyed, counter-based random substreams.

Every draw is a pure function of ``(key, counter)``. Keys are derived from the
run seed plus string labels (purpose, unit id, outcome id, ...), so a unit's
draws never depend on how many other units or outcomes exist, or on the order
in which they are visited.

The generator is a SplitMix64-style mixer evaluated on ``key + counter * gamma``.
numpy's bit generators can only be keyed one stream at a time; here whole
arrays of keys (replications x units) are evaluated in one vectorised call.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=65536)
def label_key(*labels: object) -> int:
    """Stable 64-bit key for a tuple of labels (independent of PYTHONHASHSEED)."""
    text = "\x1f".join(f"{type(x).__name__}:{x}" for x in labels)
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")


def derive_seed(seed: int, *labels: object) -> int:
    """Child seed for a labelled sub-computation, e.g. ``derive_seed(s, "replication", 7)``."""
    base = np.uint64(label_key("seed", int(seed)))
    return int(_mix64(base ^ np.uint64(label_key(*labels))))


def stream_keys(seeds, labels: list[tuple]) -> np.ndarray:
    """Keys for every (seed, label-tuple) pair, shape ``(len(seeds), len(labels))``.

    ``seeds`` may be a single int, giving a 1-d result.
    """
    scalar = np.ndim(seeds) == 0
    seed_arr = np.atleast_1d(np.asarray(seeds, dtype=object))
    seed_keys = _mix64(np.array([label_key("seed", int(s)) for s in seed_arr], dtype=np.uint64))
    lab = np.array([label_key(*t) for t in labels], dtype=np.uint64)
    keys = _mix64(seed_keys[:, None] ^ lab[None, :])
    return keys[0] if scalar else keys


def raw_bits(keys: np.ndarray, counter: int | np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.uint64)
    ctr = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = keys + (ctr + np.uint64(1)) * _GAMMA
    return _mix64(_mix64(state))


def uniforms(keys: np.ndarray, counter: int | np.ndarray = 0) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    bits = raw_bits(keys, counter) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / (1 << 53))


def normals(keys: np.ndarray, counter: int | np.ndarray = 0) -> np.ndarray:
    """Standard normal draws by inverse-CDF transform of :func:`uniforms`."""
    return ndtri(uniforms(keys, counter))


class Substream:
    """One keyed stream; the ``k``-th draw of each kind is fixed by ``(key, k)``."""

    def __init__(self, seed: int, *labels: object) -> None:
        self.seed = int(seed)
        self.labels = labels
        self.key = np.uint64(stream_keys(self.seed, [labels])[0])

    def uniform(self, size: int, start: int = 0) -> np.ndarray:
        return uniforms(np.full(size, self.key), np.arange(start, start + size, dtype=np.uint64))

    def normal(self, size: int, start: int = 0) -> np.ndarray:
        return normals(np.full(size, self.key), np.arange(start, start + size, dtype=np.uint64))

    def __repr__(self) -> str:
        return f"Substream(seed={self.seed}, labels={self.labels!r})"
