"""Whole-model inference over ping-pong activation buffers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bittensor import AccumulatorMap, BinaryTensor, FixedTensor
from .counters import CostCounters
from .errors import BnnError, PlanError, ShapeError
from .model import ModelSpec
from .reference import conv_reference, maxpool2x2, normalize_binarize
from .reuse import conv_input_reuse, conv_weight_reuse, revert_ofmaps

BACKENDS = ("reference", "input_reuse", "weight_reuse")


class ActivationBuffers:
    """Two on-chip activation arenas whose read/write roles swap every layer."""

    def __init__(self, first):
        self.slots = [first, None]
        self.read_slot = 0

    @property
    def write_slot(self) -> int:
        return 1 - self.read_slot

    def read(self):
        return self.slots[self.read_slot]

    def write(self, value) -> None:
        if self.write_slot == self.read_slot:
            raise RuntimeError("layer would overwrite its own input buffer")
        self.slots[self.write_slot] = value

    def swap(self) -> None:
        self.read_slot = self.write_slot


@dataclass
class InferenceResult:
    accumulators: AccumulatorMap
    counters: CostCounters
    layer_counters: dict[str, CostCounters] = field(default_factory=dict)
    activations: list = field(default_factory=list)

    @property
    def prediction(self) -> int:
        """Index of the largest final accumulator summed over space."""
        return int(np.argmax(self.accumulators.sum(axis=(0, 1))))


def _check_image(m: ModelSpec, img) -> None:
    inp = m.input
    if inp.activation == "binary" and not isinstance(img, BinaryTensor):
        raise ShapeError("model expects a binary input tensor")
    if inp.activation == "fixed":
        if not isinstance(img, FixedTensor):
            raise ShapeError("model expects a fixed-point input tensor")
        if (img.total_bits, img.frac_bits) != (inp.total_bits, inp.frac_bits):
            raise ShapeError(f"input format ({img.total_bits},{img.frac_bits}) != "
                             f"model ({inp.total_bits},{inp.frac_bits})")
    if img.dims != inp.dims:
        raise ShapeError(f"input dims {img.dims} != model input {inp.dims}")


def conv_layer(x, layer, backend: str, plan=None, counters: CostCounters | None = None,
               row_reset: bool = True) -> AccumulatorMap:
    """One convolution through the chosen backend, in original kernel order."""
    if backend == "reference":
        return conv_reference(x, layer, counters)
    if backend == "input_reuse":
        return conv_input_reuse(x, layer, counters, row_reset=row_reset)
    if backend == "weight_reuse":
        if plan is None:
            raise PlanError(f"{layer.name or 'layer'}: weight_reuse backend needs a reorder plan")
        return revert_ofmaps(conv_weight_reuse(x, layer, plan, counters), plan)
    raise BnnError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")


def infer(m: ModelSpec, img, backend: str = "reference", row_reset: bool = True,
          keep_activations: bool = False) -> InferenceResult:
    """Run every layer in order and return the last convolution's raw accumulators."""
    if backend not in BACKENDS:
        raise BnnError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")
    _check_image(m, img)
    if backend == "weight_reuse":
        missing = [m.layers[i].name or str(i) for i in m.conv_indices() if i not in m.plans]
        if missing:
            raise PlanError(f"weight_reuse backend needs reorder plans for: {', '.join(missing)}")

    total = CostCounters()
    per_layer: dict[str, CostCounters] = {}
    buffers = ActivationBuffers(img)
    last_acc = None
    seen = []
    for i, layer in enumerate(m.layers):
        x = buffers.read()
        if keep_activations:
            seen.append(x)
        if layer.kind == "maxpool":
            buffers.write(maxpool2x2(x))
        else:
            ctr = CostCounters()
            last_acc = conv_layer(x, layer, backend, m.plans.get(i), ctr, row_reset)
            per_layer[layer.name or f"layer{i}"] = ctr
            total.merge(ctr)
            buffers.write(normalize_binarize(last_acc, layer))
        buffers.swap()
    if last_acc is None:
        raise BnnError("model has no convolution layer")
    return InferenceResult(last_acc, total, per_layer, seen)
