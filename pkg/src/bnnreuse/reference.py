"""Ground-truth convolution, threshold binarization and pooling."""

from __future__ import annotations

import numpy as np

from .bittensor import AccumulatorMap, BinaryTensor, FixedTensor, WORD_BITS, words_for, xnor_popcount_rows
from .counters import CostCounters
from .errors import ShapeError
from .model import LayerSpec


def same_offsets(layer: LayerSpec) -> tuple[int, int]:
    """Row/column shift between input and output coordinates (0 without padding)."""
    if layer.padding != "same":
        return 0, 0
    ks = layer.weights
    return (ks.r - 1) // 2, (ks.s - 1) // 2


def ia_words_per_pixel(x: BinaryTensor | FixedTensor) -> int:
    """64-bit words needed to hold one channel vector of ``x``."""
    if isinstance(x, BinaryTensor):
        return x.nwords
    return words_for(x.c * x.total_bits)


def ia_elements_per_word(x: BinaryTensor | FixedTensor) -> int:
    if isinstance(x, BinaryTensor):
        return WORD_BITS
    return max(1, WORD_BITS // x.total_bits)


def check_conv_input(x, layer: LayerSpec) -> None:
    if not layer.is_conv:
        raise ShapeError(f"{layer.name or layer.kind} is not a convolution")
    ks = layer.weights
    if x.c != ks.c:
        raise ShapeError(f"channel mismatch: input has {x.c}, layer expects {ks.c}")
    if layer.kind == "binconv" and not isinstance(x, BinaryTensor):
        raise ShapeError("binconv layer needs a BinaryTensor input")
    if layer.kind == "fixconv" and not isinstance(x, FixedTensor):
        raise ShapeError("fixconv layer needs a FixedTensor input")
    ho, wo = layer.output_hw(x.h, x.w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.h}x{x.w} too small for {ks.r}x{ks.s} kernel")


def tap_window(layer: LayerSpec, h: int, w: int, rr: int, ss: int):
    """Output and input slices over which tap (rr, ss) reads in-range input."""
    ho, wo = layer.output_hw(h, w)
    dr, ds = same_offsets(layer)
    o_h0, o_h1 = max(0, dr - rr), min(ho, h - rr + dr)
    o_w0, o_w1 = max(0, ds - ss), min(wo, w - ss + ds)
    if o_h0 >= o_h1 or o_w0 >= o_w1:
        return None
    out = (slice(o_h0, o_h1), slice(o_w0, o_w1))
    inp = (slice(o_h0 + rr - dr, o_h1 + rr - dr), slice(o_w0 + ss - ds, o_w1 + ss - ds))
    return out, inp


def conv_reference(x: BinaryTensor | FixedTensor, layer: LayerSpec,
                   counters: CostCounters | None = None) -> AccumulatorMap:
    """Direct convolution; out-of-range taps under same padding add nothing."""
    check_conv_input(x, layer)
    ks = layer.weights
    ho, wo = layer.output_hw(x.h, x.w)
    acc = np.zeros((ho, wo, ks.k), dtype=np.int64)
    binary = isinstance(x, BinaryTensor)
    if not binary:
        signs = ks.to_pm1().astype(np.int64)
        vals = x.values.astype(np.int64)
    for rr in range(ks.r):
        for ss in range(ks.s):
            win = tap_window(layer, x.h, x.w, rr, ss)
            if win is None:
                continue
            (oh, ow), (ih, iw) = win
            if binary:
                xw = x.words[ih, iw][:, :, None, :]
                ww = ks.words[:, rr, ss, :][None, None, :, :]
                acc[oh, ow] += xnor_popcount_rows(xw, ww, ks.c)
            else:
                acc[oh, ow] += vals[ih, iw] @ signs[rr, ss]
    if counters is not None:
        dots = ho * wo * ks.k
        taps = ks.r * ks.s
        counters.add(
            bit_ops=dots * taps * ks.c,
            weight_words_read=dots * taps * ks.nwords,
            ia_words_read=dots * taps * ia_words_per_pixel(x),
            full_computations=dots,
        )
    return acc


def normalize_binarize(acc: AccumulatorMap, layer: LayerSpec) -> BinaryTensor:
    """Folded batch norm + sign: bit is +1 iff (acc >= threshold) XOR flip."""
    acc = np.asarray(acc)
    if acc.ndim != 3 or acc.shape[-1] != layer.weights.k:
        raise ShapeError(f"accumulator shape {acc.shape} does not match k={layer.weights.k}")
    bits = (acc >= layer.thresholds) ^ layer.flip
    return BinaryTensor.from_bits(bits)


def maxpool2x2(t: BinaryTensor) -> BinaryTensor:
    """2x2/2 max-pool. With 1 encoding +1 the max of a window is the OR of its bits,
    so it runs word-wise on the packed payload."""
    if t.h % 2 or t.w % 2:
        raise ShapeError(f"max-pool needs even dims, got {t.h}x{t.w}")
    wd = t.words
    pooled = wd[0::2, 0::2] | wd[1::2, 0::2] | wd[0::2, 1::2] | wd[1::2, 1::2]
    return BinaryTensor(t.h // 2, t.w // 2, t.c, np.ascontiguousarray(pooled))
