"""Difference-driven convolution engines.

Both engines compute one full result (STAGE I) and then derive every later
result from its predecessor by applying only the elements that changed
(STAGE II):

* input reuse walks input pixels in raster order; each pixel's partial
  products for all taps and kernels are obtained from the previous pixel's
  by adding ``(x_new - x_old) * w`` over the changed channels, then
  scattered into the output accumulators through the address generator.
* weight reuse walks kernels in a reorder plan's execution order; each
  kernel's ofmap is obtained from the previous kernel's by adding
  ``(w_new - w_old) * x`` over the weight positions that differ.

Results are bit-exact with :func:`bnnreuse.reference.conv_reference`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bittensor import AccumulatorMap, BinaryKernelSet, BinaryTensor, FixedTensor, WORD_BITS, unpack_bits
from .counters import CostCounters
from .errors import PlanError, ShapeError
from .model import LayerSpec
from .reference import check_conv_input, ia_elements_per_word, ia_words_per_pixel, same_offsets
from .reorder import ReorderPlan


def _values(x: BinaryTensor | FixedTensor) -> np.ndarray:
    if isinstance(x, BinaryTensor):
        return x.to_pm1().astype(np.int64)
    return x.values.astype(np.int64)


def _changed_channels(x, vals: np.ndarray, h: int, w: int, ph: int, pw: int) -> np.ndarray:
    """Channel indices where pixel (h, w) differs from pixel (ph, pw); the Chk engine."""
    if isinstance(x, BinaryTensor):
        mask = x.words[h, w] ^ x.words[ph, pw]
        if not mask.any():
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(unpack_bits(mask, x.c))
    return np.flatnonzero(vals[h, w] != vals[ph, pw])


def conv_input_reuse(x: BinaryTensor | FixedTensor, layer: LayerSpec,
                     counters: CostCounters | None = None, row_reset: bool = True) -> AccumulatorMap:
    """Convolution reusing each pixel's partial products for its right neighbour.

    With ``row_reset`` the difference chain restarts at the first pixel of
    every row; otherwise it continues from the last pixel of the previous
    row and only pixel (0, 0) is computed in full.
    """
    check_conv_input(x, layer)
    ks = layer.weights
    r, s, c, k = ks.dims
    H, W = x.h, x.w
    ho, wo = layer.output_hw(H, W)
    dr, ds = same_offsets(layer)
    vals = _values(x)
    signs = ks.to_pm1().astype(np.int64)  # (r, s, c, k), read from the WBanks
    acc = np.zeros((ho, wo, k), dtype=np.int64)
    ia_words = ia_words_per_pixel(x)
    c_words = ks.nwords

    ops = wwords = bcast = full = 0
    partial = None  # reuse buffer: (r, s, k) products of the previous pixel
    prev = None
    for h in range(H):
        rr0, rr1 = max(0, h + dr - ho + 1), min(r, h + dr + 1)
        for w in range(W):
            if prev is None or (row_reset and w == 0):
                partial = np.tensordot(vals[h, w], signs, axes=([0], [2]))
                n_diff, n_words = c, c_words
                full += r * s * k
            else:
                idx = _changed_channels(x, vals, h, w, *prev)
                n_diff = idx.size
                n_words = np.unique(idx // WORD_BITS).size if n_diff else 0
                if n_diff:
                    delta = vals[h, w, idx] - vals[prev[0], prev[1], idx]
                    partial = partial + np.tensordot(delta, signs[:, :, idx, :], axes=([0], [2]))
            ops += r * s * k * n_diff
            wwords += r * s * k * n_words
            bcast += n_diff
            prev = (h, w)

            # address generator: tap (rr, ss) lands on output (h - rr + dr, w - ss + ds)
            ss0, ss1 = max(0, w + ds - wo + 1), min(s, w + ds + 1)
            if rr0 < rr1 and ss0 < ss1:
                acc[h + dr - rr1 + 1:h + dr - rr0 + 1, w + ds - ss1 + 1:w + ds - ss0 + 1] += \
                    partial[rr0:rr1, ss0:ss1][::-1, ::-1]
    if counters is not None:
        counters.add(bit_ops=ops, weight_words_read=wwords, ia_words_read=H * W * ia_words,
                     broadcasts=bcast, full_computations=full)
    return acc


@dataclass
class WeightBase:
    """Running copy of the most recent real kernel, rebuilt from difference masks."""

    words: np.ndarray  # (r, s, nwords) uint64

    def apply(self, mask: np.ndarray) -> None:
        self.words ^= mask


@dataclass(frozen=True)
class EncodedPartition:
    """Offline same(0)/different(1) encoding of one partition's kernels."""

    first: np.ndarray         # packed real values of the first kernel, (r, s, nwords)
    masks: tuple[np.ndarray, ...]  # one (r, s, nwords) difference mask per later kernel


def encode_differences(ks: BinaryKernelSet, plan: ReorderPlan) -> list[EncodedPartition]:
    plan.validate(ks.k)
    out = []
    for part in plan.partitions:
        words = ks.words[list(part)]
        masks = tuple(words[j] ^ words[j - 1] for j in range(1, len(part)))
        out.append(EncodedPartition(words[0].copy(), masks))
    return out


def _patches(x, layer: LayerSpec) -> np.ndarray:
    """(ho*wo, r*s*c) matrix of input windows, zero where a tap is out of range."""
    ks = layer.weights
    ho, wo = layer.output_hw(x.h, x.w)
    dr, ds = same_offsets(layer)
    vals = _values(x)
    padded = np.zeros((ho + ks.r - 1, wo + ks.s - 1, x.c), dtype=np.int64)
    hh = min(x.h, padded.shape[0] - dr)
    ww = min(x.w, padded.shape[1] - ds)
    padded[dr:dr + hh, ds:ds + ww] = vals[:hh, :ww]
    cols = np.empty((ho, wo, ks.r, ks.s, x.c), dtype=np.int64)
    for rr in range(ks.r):
        for ss in range(ks.s):
            cols[:, :, rr, ss] = padded[rr:rr + ho, ss:ss + wo]
    return cols.reshape(ho * wo, -1)


def conv_weight_reuse(x: BinaryTensor | FixedTensor, layer: LayerSpec, plan: ReorderPlan,
                      counters: CostCounters | None = None) -> AccumulatorMap:
    """Convolution reusing each kernel's ofmap for the next kernel in ``plan``.

    Output channel ``j`` holds the kernel executed at position ``j``; use
    :func:`revert_ofmaps` to restore the original channel order.
    """
    check_conv_input(x, layer)
    ks = layer.weights
    try:
        encoded = encode_differences(ks, plan)
    except PlanError as exc:
        raise PlanError(f"{layer.name or 'layer'}: {exc}") from None
    r, s, c, k = ks.dims
    ho, wo = layer.output_hw(x.h, x.w)
    npos = ho * wo
    cols = _patches(x, layer)
    per_word = ia_elements_per_word(x)
    acc = np.zeros((npos, k), dtype=np.int64)

    ops = wwords = iwords = bcast = full = 0
    pos = 0
    for part in encoded:
        base = WeightBase(part.first.copy())
        signs = np.where(unpack_bits(base.words, c).reshape(-1), 1, -1)
        cur = cols @ signs
        acc[:, pos] = cur
        pos += 1
        ops += npos * r * s * c
        wwords += npos * r * s * ks.nwords
        iwords += npos * r * s * -(-c // per_word)
        bcast += r * s * c
        full += npos
        for mask in part.masks:
            base.apply(mask)
            idx = np.flatnonzero(unpack_bits(mask, c).reshape(-1))
            if idx.size:
                new = np.where(unpack_bits(base.words, c).reshape(-1)[idx], 1, -1)
                # w_new - w_old = 2 * w_new wherever the sign flipped
                cur = cur + 2 * (cols[:, idx] @ new)
                tap, chan = np.divmod(idx, c)
                iwords += npos * np.unique(tap * c + chan // per_word).size
            acc[:, pos] = cur
            pos += 1
            ops += npos * idx.size
            wwords += npos * int(np.count_nonzero(mask))
            bcast += idx.size
    if counters is not None:
        counters.add(bit_ops=ops, weight_words_read=wwords, ia_words_read=iwords,
                     broadcasts=bcast, full_computations=full)
    return acc.reshape(ho, wo, k)


def revert_ofmaps(acc: AccumulatorMap, plan: ReorderPlan) -> AccumulatorMap:
    """Move executed channel ``j`` back to original kernel ``plan.revert[j]``."""
    acc = np.asarray(acc)
    if acc.ndim != 3 or acc.shape[-1] != plan.k:
        raise ShapeError(f"accumulator shape {acc.shape} does not match plan over {plan.k} kernels")
    out = np.empty_like(acc)
    out[..., plan.revert] = acc
    return out
