"""Layer/model description, the ``.bnn`` file format and synthetic generators.

File format (all integers little-endian)::

    header   "BNN1" | u16 version=1 | u16 flags=0
    input    u16 h | u16 w | u16 c | u8 activation (0 binary, 1 fixed) | u8 T | u8 F | u8 0
    u16 layer count
    records  u8 tag | u32 body length | body          (repeated)
    end      u8 0xFF

    tag 1 binconv / tag 2 fixconv body:
        u8 name length | name (utf-8) | u16 r | u16 s | u16 c | u16 k | u8 padding (0 none, 1 same)
        k*r*s*ceil(c/64) u64 weight words, ordered (k, r, s, word), LSB-first channels
        k i32 thresholds | k u8 flip
    tag 3 maxpool body:
        u8 name length | name | u8 window=2 | u8 stride=2
    tag 0x10 reorder plan body (optional, after the layers):
        u16 layer index | u16 K | K u16 partition sizes | k u16 kernel indices | f64 chain cost

Batch norm is stored folded into integer thresholds in accumulator units:
an output bit is +1 iff ``(acc >= threshold) XOR flip``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .bittensor import BinaryKernelSet, BinaryTensor, FixedTensor, words_for
from .errors import (
    BadMagicError,
    BnnError,
    DimensionChainError,
    FormatError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .reorder import ReorderPlan

MAGIC = b"BNN1"
VERSION = 1

TAG_BINCONV = 1
TAG_FIXCONV = 2
TAG_MAXPOOL = 3
TAG_PLAN = 0x10
TAG_END = 0xFF

_KIND_TAGS = {"binconv": TAG_BINCONV, "fixconv": TAG_FIXCONV, "maxpool": TAG_MAXPOOL}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_PADDINGS = ("none", "same")

# Workload of the accelerated BinaryNet CIFAR-10 convolutions.
BINARYNET_INPUT = (32, 32, 128)
BINARYNET_LAYERS = (
    ("conv", 3, 3, 128, 128),
    "pool",
    ("conv", 3, 3, 128, 256),
    ("conv", 3, 3, 256, 256),
    "pool",
    ("conv", 3, 3, 256, 512),
    ("conv", 3, 3, 512, 512),
    "pool",
)
# (reorder range, partitions) per conv layer, in layer order.
BINARYNET_PARTITION_PARAMS = ((64, 2), (64, 4), (64, 4), (64, 8), (64, 8))


@dataclass(frozen=True)
class InputSpec:
    h: int
    w: int
    c: int
    activation: str = "binary"  # or "fixed"
    total_bits: int = 8
    frac_bits: int = 4

    def __post_init__(self):
        if self.activation not in ("binary", "fixed"):
            raise BnnError(f"unknown activation kind {self.activation!r}")
        if min(self.h, self.w, self.c) < 1:
            raise BnnError("input dims must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.c)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: str
    weights: BinaryKernelSet | None = None
    padding: str = "same"
    thresholds: np.ndarray | None = None
    flip: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KIND_TAGS:
            raise BnnError(f"unknown layer kind {self.kind!r}")
        if self.is_conv:
            if self.weights is None:
                raise BnnError(f"{self.kind} layer needs weights")
            if self.padding not in _PADDINGS:
                raise BnnError(f"unknown padding {self.padding!r}")
            k = self.weights.k
            thr = np.zeros(k, np.int64) if self.thresholds is None else np.asarray(self.thresholds, np.int64)
            flip = np.zeros(k, bool) if self.flip is None else np.asarray(self.flip, bool)
            if thr.shape != (k,) or flip.shape != (k,):
                raise BnnError(f"threshold/flip arrays must have length k={k}")
            object.__setattr__(self, "thresholds", thr)
            object.__setattr__(self, "flip", flip)

    @property
    def is_conv(self) -> bool:
        return self.kind in ("binconv", "fixconv")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.kind == "maxpool":
            return h // 2, w // 2
        if self.padding == "same":
            return h, w
        return h - self.weights.r + 1, w - self.weights.s + 1

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        if (self.kind, self.name) != (other.kind, other.name):
            return False
        if not self.is_conv:
            return True
        return (
            self.padding == other.padding
            and self.weights == other.weights
            and np.array_equal(self.thresholds, other.thresholds)
            and np.array_equal(self.flip, other.flip)
        )

    def __repr__(self):
        if self.is_conv:
            return f"LayerSpec({self.name or self.kind}, {self.kind}, dims={self.weights.dims}, padding={self.padding})"
        return f"LayerSpec({self.name or self.kind}, maxpool 2x2/2)"


@dataclass(frozen=True, eq=False)
class ModelSpec:
    input: InputSpec
    layers: tuple[LayerSpec, ...]
    plans: dict[int, ReorderPlan] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "plans", dict(sorted(self.plans.items())))
        self.layer_inputs()  # validates the chain
        for idx, plan in self.plans.items():
            if not 0 <= idx < len(self.layers) or not self.layers[idx].is_conv:
                raise BnnError(f"reorder plan attached to non-conv layer {idx}")
            plan.validate(self.layers[idx].weights.k)

    def layer_inputs(self) -> list[tuple[int, int, int, str]]:
        """(h, w, c, activation) seen by every layer; raises on a broken chain."""
        h, w, c = self.input.dims
        act = self.input.activation
        out = []
        for i, layer in enumerate(self.layers):
            label = layer.name or f"layer {i}"
            out.append((h, w, c, act))
            if layer.kind == "maxpool":
                if act != "binary":
                    raise DimensionChainError(f"{label}: max-pool expects binary activations")
                if h % 2 or w % 2:
                    raise DimensionChainError(f"{label}: max-pool needs even dims, got {h}x{w}")
            else:
                ks = layer.weights
                if ks.c != c:
                    raise DimensionChainError(f"{label}: expects {ks.c} input channels, previous layer gives {c}")
                want = "fixed" if layer.kind == "fixconv" else "binary"
                if act != want:
                    raise DimensionChainError(f"{label}: {layer.kind} expects {want} activations, gets {act}")
                c = ks.k
                act = "binary"
            h, w = layer.output_hw(h, w)
            if h < 1 or w < 1:
                raise DimensionChainError(f"{label}: output collapses to {h}x{w}")
        return out

    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.is_conv]

    def with_plans(self, plans: dict[int, ReorderPlan]) -> "ModelSpec":
        return ModelSpec(self.input, self.layers, plans)

    def __eq__(self, other):
        if not isinstance(other, ModelSpec):
            return NotImplemented
        return self.input == other.input and self.layers == other.layers and self.plans == other.plans


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

def _name_bytes(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 255:
        raise BnnError("layer name longer than 255 bytes")
    return struct.pack("<B", len(raw)) + raw


def _layer_body(layer: LayerSpec) -> bytes:
    out = io.BytesIO()
    out.write(_name_bytes(layer.name))
    if layer.kind == "maxpool":
        out.write(struct.pack("<BB", 2, 2))
        return out.getvalue()
    ks = layer.weights
    out.write(struct.pack("<HHHHB", ks.r, ks.s, ks.c, ks.k, _PADDINGS.index(layer.padding)))
    out.write(ks.words.astype("<u8").tobytes())
    out.write(layer.thresholds.astype("<i4").tobytes())
    out.write(layer.flip.astype(np.uint8).tobytes())
    return out.getvalue()


def _plan_body(idx: int, plan: ReorderPlan) -> bytes:
    sizes = [len(p) for p in plan.partitions]
    return (
        struct.pack("<HH", idx, plan.K)
        + np.asarray(sizes, "<u2").tobytes()
        + plan.revert.astype("<u2").tobytes()
        + struct.pack("<d", plan.chain_cost)
    )


def dumps_model(m: ModelSpec) -> bytes:
    out = io.BytesIO()
    inp = m.input
    out.write(MAGIC)
    out.write(struct.pack("<HH", VERSION, 0))
    out.write(struct.pack("<HHHBBBB", inp.h, inp.w, inp.c, 0 if inp.activation == "binary" else 1,
                          inp.total_bits, inp.frac_bits, 0))
    out.write(struct.pack("<H", len(m.layers)))
    for layer in m.layers:
        body = _layer_body(layer)
        out.write(struct.pack("<BI", _KIND_TAGS[layer.kind], len(body)))
        out.write(body)
    for idx, plan in m.plans.items():
        body = _plan_body(idx, plan)
        out.write(struct.pack("<BI", TAG_PLAN, len(body)))
        out.write(body)
    out.write(struct.pack("<B", TAG_END))
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"truncated payload: need {n} bytes at offset {self.pos}, "
                                        f"only {len(self.data) - self.pos} left")
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def done(self) -> bool:
        return self.pos == len(self.data)


def _read_layer(tag: int, body: _Reader) -> LayerSpec:
    (nlen,) = body.unpack("<B")
    name = body.take(nlen).decode("utf-8")
    kind = _TAG_KINDS[tag]
    if kind == "maxpool":
        window, stride = body.unpack("<BB")
        if (window, stride) != (2, 2):
            raise FormatError(f"unsupported pooling {window}x{window}/{stride}")
        return LayerSpec("maxpool", name=name)
    r, s, c, k, pad = body.unpack("<HHHHB")
    if pad >= len(_PADDINGS):
        raise FormatError(f"unknown padding code {pad}")
    words = body.array("<u8", k * r * s * words_for(c)).astype(np.uint64).reshape(k, r, s, words_for(c))
    thresholds = body.array("<i4", k).astype(np.int64)
    flip = body.array("u1", k).astype(bool)
    return LayerSpec(kind, BinaryKernelSet(r, s, c, k, words), _PADDINGS[pad], thresholds, flip, name)


def _read_plan(body: _Reader) -> tuple[int, ReorderPlan]:
    idx, K = body.unpack("<HH")
    sizes = body.array("<u2", K).astype(int)
    order = body.array("<u2", int(sizes.sum())).astype(int).tolist()
    (cost,) = body.unpack("<d")
    parts, pos = [], 0
    for size in sizes:
        parts.append(tuple(order[pos:pos + size]))
        pos += size
    return idx, ReorderPlan(tuple(parts), cost)


def loads_model(data: bytes) -> ModelSpec:
    rd = _Reader(data)
    if len(data) < 4 or rd.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a BNN1 model file")
    version, _flags = rd.unpack("<HH")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (expected {VERSION})")
    h, w, c, act, tbits, fbits, _ = rd.unpack("<HHHBBBB")
    if act > 1:
        raise FormatError(f"unknown activation code {act}")
    inp = InputSpec(h, w, c, "binary" if act == 0 else "fixed", tbits, fbits)
    (nlayers,) = rd.unpack("<H")
    layers, plans = [], {}
    while True:
        (tag,) = rd.unpack("<B")
        if tag == TAG_END:
            break
        (length,) = rd.unpack("<I")
        body = _Reader(rd.take(length))
        if tag in _TAG_KINDS:
            if plans:
                raise FormatError("layer record after plan section")
            layers.append(_read_layer(tag, body))
        elif tag == TAG_PLAN:
            idx, plan = _read_plan(body)
            plans[idx] = plan
        else:
            raise FormatError(f"unknown record tag 0x{tag:02x}")
        if not body.done():
            raise FormatError(f"record tag 0x{tag:02x} has {len(body.data) - body.pos} trailing bytes")
    if len(layers) != nlayers:
        raise TruncatedPayloadError(f"truncated payload: header announces {nlayers} layers, found {len(layers)}")
    if not rd.done():
        raise FormatError("trailing bytes after end marker")
    return ModelSpec(inp, tuple(layers), plans)


def save_model(m: ModelSpec, sink: str | Path | BinaryIO) -> bytes:
    data = dumps_model(m)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)
    return data


def load_model(source: str | Path | BinaryIO) -> ModelSpec:
    if isinstance(source, (str, Path)):
        return loads_model(Path(source).read_bytes())
    return loads_model(source.read())


def shipped_model_path() -> Path:
    return Path(__file__).with_name("data") / "binarynet_cifar10.bnn"


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _layer_entry(entry):
    if entry == "pool" or (isinstance(entry, (tuple, list)) and entry[0] == "pool"):
        return ("pool",)
    if isinstance(entry, (tuple, list)) and entry[0] == "conv" and len(entry) == 5:
        return tuple(entry)
    raise BnnError(f"bad arch entry {entry!r}; expected ('conv', r, s, c, k) or 'pool'")


def gen_synthetic_model(
    input_dims: Sequence[int] = BINARYNET_INPUT,
    layers: Sequence = BINARYNET_LAYERS,
    seed: int = 0,
    activation: str = "binary",
    fixed_format: tuple[int, int] = (8, 4),
    padding: str = "same",
    threshold_range: int = 4,
    flip_prob: float = 0.25,
) -> ModelSpec:
    """Random +/-1 weights and small integer thresholds for a given layer chain.

    With ``activation="fixed"`` the first convolution is a fixed-point
    layer; everything after it sees binary activations.
    """
    rng = np.random.default_rng(seed)
    specs, n_conv, n_pool = [], 0, 0
    act = activation
    for entry in layers:
        entry = _layer_entry(entry)
        if entry[0] == "pool":
            n_pool += 1
            specs.append(LayerSpec("maxpool", name=f"pool{n_pool}"))
            continue
        _, r, s, c, k = entry
        n_conv += 1
        weights = BinaryKernelSet.from_pm1(np.where(rng.random((r, s, c, k)) < 0.5, -1, 1).astype(np.int8))
        thresholds = rng.integers(-threshold_range, threshold_range + 1, size=k)
        flip = rng.random(k) < flip_prob
        kind = "fixconv" if act == "fixed" else "binconv"
        specs.append(LayerSpec(kind, weights, padding, thresholds, flip, f"conv{n_conv}"))
        act = "binary"
    h, w, c = input_dims
    inp = InputSpec(h, w, c, activation, *fixed_format)
    return ModelSpec(inp, tuple(specs))


def gen_input(kind: str, dims: Sequence[int], seed: int, p: float | None = None,
              fixed: tuple[int, int] | None = None) -> BinaryTensor | FixedTensor:
    """Synthetic activations with controllable horizontal similarity.

    constant: every element equal. noise: iid uniform. vstripes: each column
    repeats the previous one element-wise with probability ``p``. smooth: a
    thresholded horizontal ramp, one sign change per (row, channel) at most.
    ``fixed=(T, F)`` switches to fixed-point output.
    """
    h, w, c = (int(d) for d in dims)
    if min(h, w, c) < 1:
        raise BnnError(f"invalid dims {dims}")
    rng = np.random.default_rng(seed)
    if kind == "vstripes":
        if p is None or not 0.0 <= p <= 1.0:
            raise BnnError(f"vstripes needs p in [0, 1], got {p}")
    elif kind not in ("constant", "noise", "smooth"):
        raise BnnError(f"unknown input kind {kind!r}")

    if fixed is None:
        if kind == "constant":
            bits = np.ones((h, w, c), bool)
        elif kind == "noise":
            bits = rng.random((h, w, c)) < 0.5
        elif kind == "vstripes":
            bits = np.empty((h, w, c), bool)
            bits[:, 0] = rng.random((h, c)) < 0.5
            flips = rng.random((h, w - 1, c)) >= p
            for col in range(1, w):
                bits[:, col] = bits[:, col - 1] ^ flips[:, col - 1]
        else:
            ramp = np.linspace(0.0, 1.0, w)[None, :, None]
            bits = ramp >= rng.random((h, 1, c))
        return BinaryTensor.from_bits(bits)

    tbits, fbits = fixed
    lo, hi = -(1 << (tbits - 1)), (1 << (tbits - 1)) - 1
    span = hi - lo + 1
    if kind == "constant":
        raw = np.full((h, w, c), min(hi, 1 << fbits), np.int32)
    elif kind == "noise":
        raw = rng.integers(lo, hi + 1, size=(h, w, c))
    elif kind == "vstripes":
        raw = np.empty((h, w, c), np.int64)
        raw[:, 0] = rng.integers(lo, hi + 1, size=(h, c))
        change = rng.random((h, w - 1, c)) >= p
        step = rng.integers(1, span, size=(h, w - 1, c))
        for col in range(1, w):
            prev = raw[:, col - 1]
            moved = (prev - lo + step[:, col - 1]) % span + lo
            raw[:, col] = np.where(change[:, col - 1], moved, prev)
    else:
        ramp = np.linspace(lo, hi, w)[None, :, None]
        raw = np.clip(np.round(ramp + rng.normal(0.0, 1.0, (h, 1, c)) * span / 8), lo, hi)
    return FixedTensor.from_raw(raw.astype(np.int32), tbits, fbits)


def workload_summary(m: ModelSpec) -> list[dict]:
    """One row per layer: input dims, weight dims and size, reorder parameters."""
    rows = []
    for i, (layer, (h, w, c, _)) in enumerate(zip(m.layers, m.layer_inputs())):
        row = {"layer": layer.name or f"layer{i}", "input_h": h, "input_w": w,
               "weight_dims": "-", "weight_bits": 0, "reorder_range": 0, "partitions": 0}
        if layer.is_conv:
            ks = layer.weights
            row["weight_dims"] = f"{ks.r},{ks.s},{ks.c},{ks.k}"
            row["weight_bits"] = ks.r * ks.s * ks.c * ks.k
            plan = m.plans.get(i)
            if plan is not None:
                row["reorder_range"] = plan.max_range
                row["partitions"] = plan.K
        rows.append(row)
    return rows


def save_images(path: str | Path, images: Sequence[BinaryTensor | FixedTensor]) -> None:
    """Store a homogeneous image set as ``.npz`` (values as +/-1 or raw integers)."""
    if not images:
        raise BnnError("no images to save")
    first = images[0]
    if isinstance(first, BinaryTensor):
        if not all(isinstance(t, BinaryTensor) and t.dims == first.dims for t in images):
            raise BnnError("image set must share kind and dims")
        np.savez_compressed(path, values=np.stack([t.to_pm1() for t in images]), activation="binary",
                            total_bits=1, frac_bits=0)
    else:
        if not all(isinstance(t, FixedTensor) and t.dims == first.dims
                   and (t.total_bits, t.frac_bits) == (first.total_bits, first.frac_bits) for t in images):
            raise BnnError("image set must share kind, dims and fixed-point format")
        np.savez_compressed(path, values=np.stack([t.values for t in images]), activation="fixed",
                            total_bits=first.total_bits, frac_bits=first.frac_bits)


def load_images(path: str | Path) -> list[BinaryTensor | FixedTensor]:
    try:
        with np.load(path) as data:
            values = data["values"]
            activation = str(data["activation"])
            tbits, fbits = int(data["total_bits"]), int(data["frac_bits"])
    except KeyError as exc:
        raise BnnError(f"{path}: not an image set ({exc} missing)") from None
    if values.ndim != 4:
        raise BnnError(f"{path}: expected (n, h, w, c) values")
    if activation == "binary":
        return [BinaryTensor.from_pm1(v) for v in values]
    if activation == "fixed":
        return [FixedTensor.from_raw(v, tbits, fbits) for v in values]
    raise BnnError(f"{path}: unknown activation {activation!r}")
