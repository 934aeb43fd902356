"""Bit-packed binary tensors, fixed-point tensors and dot-product primitives.

Layout used everywhere (tensors, kernels, model files):

* bit value 1 encodes +1, bit value 0 encodes -1
* channels are the fastest-varying index, packed LSB-first into 64-bit words
* every (h, w) channel vector (or (k, r, s) kernel vector) starts on a word
  boundary; bits past ``c`` in the last word are always zero
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BnnError, ShapeError

WORD_BITS = 64

# Accumulators are plain int64 arrays shaped (h_o, w_o, k).
AccumulatorMap = np.ndarray


def words_for(n: int) -> int:
    return -(-int(n) // WORD_BITS)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into little-endian uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    nw = words_for(n)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = nw * 8 - packed.shape[-1]
    if pad:
        widths = [(0, 0)] * (packed.ndim - 1) + [(0, pad)]
        packed = np.pad(packed, widths)
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, count=n, bitorder="little").astype(bool)


def tail_mask(n: int) -> np.uint64:
    """Mask selecting the valid bits of the last word of an ``n``-element vector."""
    rem = n % WORD_BITS
    if rem == 0:
        return np.uint64(0xFFFFFFFFFFFFFFFF)
    return np.uint64((1 << rem) - 1)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def _check_pm1(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.size and not np.all((arr == 1) | (arr == -1)):
        raise BnnError("binary tensors accept only -1/+1 values")
    return arr


@dataclass(frozen=True, eq=False)
class BinaryTensor:
    """Packed +/-1 activation tensor of logical shape (h, w, c)."""

    h: int
    w: int
    c: int
    words: np.ndarray  # (h, w, ceil(c/64)) uint64

    def __post_init__(self):
        expected = (self.h, self.w, words_for(self.c))
        if self.words.shape != expected:
            raise ShapeError(f"payload shape {self.words.shape} != {expected}")
        if self.words.dtype != np.uint64:
            raise ShapeError("payload must be uint64")
        if self.c % WORD_BITS and np.any(self.words[..., -1] & ~tail_mask(self.c)):
            raise BnnError("padding bits must be zero")

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BinaryTensor":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 3:
            raise ShapeError(f"expected (h, w, c) array, got shape {bits.shape}")
        h, w, c = bits.shape
        return cls(h, w, c, pack_bits(bits))

    @classmethod
    def from_pm1(cls, arr: np.ndarray) -> "BinaryTensor":
        return cls.from_bits(_check_pm1(arr) > 0)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.c)

    @property
    def nwords(self) -> int:
        return words_for(self.c)

    @property
    def payload(self) -> np.ndarray:
        return self.words.reshape(-1)

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.c)

    def to_pm1(self) -> np.ndarray:
        return np.where(self.bits(), 1, -1).astype(np.int8)

    def __eq__(self, other):
        if not isinstance(other, BinaryTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.words, other.words)

    def __repr__(self):
        return f"BinaryTensor(h={self.h}, w={self.w}, c={self.c})"


@dataclass(frozen=True, eq=False)
class BinaryKernelSet:
    """Packed +/-1 weights W(r, s, c, k); one packed channel vector per (k, r, s)."""

    r: int
    s: int
    c: int
    k: int
    words: np.ndarray  # (k, r, s, ceil(c/64)) uint64

    def __post_init__(self):
        expected = (self.k, self.r, self.s, words_for(self.c))
        if self.words.shape != expected:
            raise ShapeError(f"payload shape {self.words.shape} != {expected}")
        if self.words.dtype != np.uint64:
            raise ShapeError("payload must be uint64")
        if self.c % WORD_BITS and np.any(self.words[..., -1] & ~tail_mask(self.c)):
            raise BnnError("padding bits must be zero")

    @classmethod
    def from_pm1(cls, arr: np.ndarray) -> "BinaryKernelSet":
        """Build from an (r, s, c, k) array of +/-1."""
        arr = _check_pm1(arr)
        if arr.ndim != 4:
            raise ShapeError(f"expected (r, s, c, k) array, got shape {arr.shape}")
        r, s, c, k = arr.shape
        bits = np.transpose(arr > 0, (3, 0, 1, 2))
        return cls(r, s, c, k, pack_bits(bits))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.r, self.s, self.c, self.k)

    @property
    def nwords(self) -> int:
        return words_for(self.c)

    @property
    def payload(self) -> np.ndarray:
        return self.words.reshape(-1)

    def to_pm1(self) -> np.ndarray:
        """Unpack to an (r, s, c, k) int8 array."""
        bits = unpack_bits(self.words, self.c)
        return np.transpose(np.where(bits, 1, -1).astype(np.int8), (1, 2, 3, 0))

    def kernel_bits(self) -> np.ndarray:
        """(k, r*s*c) boolean matrix of flattened kernels."""
        return unpack_bits(self.words, self.c).reshape(self.k, -1)

    def take(self, order) -> "BinaryKernelSet":
        order = np.asarray(order, dtype=np.int64)
        return BinaryKernelSet(self.r, self.s, self.c, len(order), self.words[order].copy())

    def __eq__(self, other):
        if not isinstance(other, BinaryKernelSet):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.words, other.words)

    def __repr__(self):
        return f"BinaryKernelSet(r={self.r}, s={self.s}, c={self.c}, k={self.k})"


@dataclass(frozen=True, eq=False)
class FixedTensor:
    """Two's-complement fixed-point activations stored as raw integers."""

    values: np.ndarray  # (h, w, c) int32 raw units
    total_bits: int = 8
    frac_bits: int = 4

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"expected (h, w, c) array, got shape {self.values.shape}")
        if not 1 < self.total_bits <= 31 or not 0 <= self.frac_bits < self.total_bits:
            raise BnnError(f"invalid fixed-point format ({self.total_bits},{self.frac_bits})")
        lo, hi = self.limits
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise BnnError(f"value outside {self.total_bits}-bit range")

    @property
    def limits(self) -> tuple[int, int]:
        half = 1 << (self.total_bits - 1)
        return -half, half - 1

    @classmethod
    def from_raw(cls, raw, total_bits: int = 8, frac_bits: int = 4) -> "FixedTensor":
        return cls(np.asarray(raw, dtype=np.int32), total_bits, frac_bits)

    @classmethod
    def from_real(cls, x, total_bits: int = 8, frac_bits: int = 4) -> "FixedTensor":
        x = np.asarray(x, dtype=np.float64)
        if np.isnan(x).any():
            raise BnnError("cannot quantize NaN")
        half = 1 << (total_bits - 1)
        raw = np.clip(np.round(x * (1 << frac_bits)), -half, half - 1).astype(np.int32)
        return cls(raw, total_bits, frac_bits)

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def c(self) -> int:
        return self.values.shape[2]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def to_real(self) -> np.ndarray:
        return self.values / float(1 << self.frac_bits)

    def __eq__(self, other):
        if not isinstance(other, FixedTensor):
            return NotImplemented
        return (
            (self.total_bits, self.frac_bits) == (other.total_bits, other.frac_bits)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        h, w, c = self.dims
        return f"FixedTensor(h={h}, w={w}, c={c}, fmt=({self.total_bits},{self.frac_bits}))"


def binarize(x) -> BinaryTensor:
    """Deterministic sign binarization; zero maps to +1.

    Accepts an (h, w, c) array, or a 1-D array treated as (1, 1, n).
    """
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise BnnError("binarize: NaN in input")
    if x.ndim == 1:
        x = x.reshape(1, 1, -1)
    return BinaryTensor.from_bits(x >= 0)


def _as_words(v) -> np.ndarray:
    return np.atleast_1d(np.asarray(v, dtype=np.uint64))


def xnor_popcount_dot(x, w, n: int) -> int:
    """Sum of x_i * w_i over two packed +/-1 vectors of ``n`` elements."""
    x = _as_words(x)
    w = _as_words(w)
    if x.shape != w.shape or x.shape[-1] != words_for(n):
        raise ShapeError(f"length mismatch: {x.shape} vs {w.shape} for n={n}")
    same = ~(x ^ w)
    same[-1] &= tail_mask(n)
    return int(2 * int(popcount(same).sum()) - n)


def xnor_popcount_rows(x: np.ndarray, w: np.ndarray, n: int) -> np.ndarray:
    """Broadcasting variant over leading axes; last axis holds the words.

    Relies on zero padding in both operands, so XOR of padding is zero.
    """
    return n - 2 * popcount(x ^ w).sum(axis=-1, dtype=np.int64)


def fixed_dot(x, w, n: int) -> int:
    """Sum of +x_i where w_i = +1 and -x_i where w_i = -1, in raw integer units."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    w = _as_words(w)
    if x.shape[0] != n or w.shape[-1] != words_for(n):
        raise ShapeError(f"length mismatch: {x.shape[0]} values, {w.shape[-1]} words, n={n}")
    signs = unpack_bits(w, n)
    return int(np.where(signs, x, -x).sum())
