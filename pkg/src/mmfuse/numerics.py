"""Low-level numerics: radix-2 FFT, circular convolution, softmax and a
splittable counter-based RNG.

Vectors are plain float64 / complex128 numpy arrays. Every transform acts on
the last axis, so batches of shape ``(..., d)`` go through the same code path
as single vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError

_MASK64 = (1 << 64) - 1


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def as_real_vec(values, name="vector") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite entries")
    return arr


@lru_cache(maxsize=64)
def _bit_reverse_perm(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=256)
def _twiddles(m: int, sign: int) -> np.ndarray:
    k = np.arange(m // 2)
    return np.exp(sign * 2j * np.pi * k / m)


def _fft_radix2(x, sign: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1] if x.ndim else 0
    if not is_power_of_two(n):
        raise DimensionError(f"FFT length must be a power of two, got {n}")
    lead = x.shape[:-1]
    out = x[..., _bit_reverse_perm(n)]
    m = 2
    while m <= n:
        half = m // 2
        blocks = out.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * _twiddles(m, sign)
        out = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return out


def fft(x) -> np.ndarray:
    """Forward DFT ``X[k] = sum_m x[m] exp(-2 pi i k m / n)`` over the last axis."""
    return _fft_radix2(x, -1)


def inverse_fft(x) -> np.ndarray:
    """Inverse of :func:`fft`, including the ``1/n`` normalisation."""
    x = np.asarray(x)
    return _fft_radix2(x, +1) / x.shape[-1]


def circular_convolve(a, b) -> np.ndarray:
    """``out[k] = sum_m a[m] b[(k - m) mod d]`` over the last axis, via FFT.

    ``d`` must be a power of two; no padding is done.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"length mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    return inverse_fft(fft(a) * fft(b)).real


def circular_correlate(g, b) -> np.ndarray:
    """Adjoint of ``a -> circular_convolve(a, b)``: ``out[m] = sum_k g[k] b[(k - m) mod d]``."""
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if g.shape[-1] != b.shape[-1]:
        raise DimensionError(f"length mismatch: {g.shape[-1]} vs {b.shape[-1]}")
    return inverse_fft(fft(g) * np.conj(fft(b))).real


def softmax(logits, axis=-1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Identifier of a reproducible random stream.

    Draws come from numpy's Philox-4x64 counter-based generator keyed by the
    128-bit value ``seed | stream_id << 64``; the counter starts at zero, so
    a given ``(seed, stream_id)`` always produces the same sequence.
    Sub-streams are derived with :meth:`child` by mixing the label into the
    stream id with SplitMix64, never by sharing generator state.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not (0 <= int(v) <= _MASK64):
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        key = int(self.seed) | (int(self.stream_id) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, label) -> RngStream:
        if isinstance(label, str):
            h = 0xCBF29CE484222325
            for byte in label.encode():
                h = ((h ^ byte) * 0x100000001B3) & _MASK64
            label = h
        return RngStream(self.seed, splitmix64(self.stream_id ^ splitmix64(int(label) & _MASK64)))


def rng_uniform_sign(rng: RngStream, n: int) -> np.ndarray:
    """``n`` independent fair +-1 draws as float64."""
    if n < 1:
        raise DimensionError("need n >= 1 signs")
    bits = rng.generator().integers(0, 2, size=n)
    return (2 * bits - 1).astype(np.float64)
