"""Parametric cycle model of the input-reuse and weight-reuse accelerators.

Input-reuse accelerator: kernels are spread round-robin over the PEs. For
every input pixel the checking engine (Chk) diffs the pixel against its
left neighbour and broadcasts the changed channels; each PE updates the
partial products of its kernels for all taps and accumulates them into its
output bank. The ``baseline`` strategy is the same machine broadcasting
whole pixels and recomputing every product.

Weight-reuse accelerator: output rows are spread round-robin over the PEs;
the Chk streams the same/different mask of each kernel against the weight
base and every PE updates its ofmap positions. Partial sums from rows held
on other PEs are reduced and ofmaps reverted in the batch-norm engine.

Cycle costs come from :class:`ArchConfig`; every cost coefficient is a
configuration value, none is measured hardware data.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .bittensor import BinaryTensor, FixedTensor, WORD_BITS, unpack_bits, words_for
from .counters import CostCounters
from .errors import BnnError, PlanError
from .model import LayerSpec, ModelSpec
from .reference import ia_elements_per_word, ia_words_per_pixel
from .reorder import ReorderPlan, make_reorder_plan

STRATEGIES = ("baseline", "input_reuse", "weight_reuse")
# Speedups closer than this (relative) count as a tie, resolved for input
# reuse: it needs no ofmap revert and no on-chip sequence table.
TIE_TOLERANCE = 0.01
PHASES = ("load", "check", "broadcast", "accumulate", "normalize")


@dataclass(frozen=True)
class ArchConfig:
    pe_count: int = 8
    broadcast_lanes: int = 64       # elements per cycle on the broadcast bus
    popcount_lanes: int = 64        # bit-ops per cycle in each PE
    offchip_bandwidth: float = 1.0  # bytes per cycle
    clock_hz: float = 2e8
    check_cycles: float = 1.0       # per pixel (input reuse) or per kernel (weight reuse)
    accumulate_cycles: float = 1.0  # per partial result written back
    normalize_lanes: int = 64       # ofmap elements per cycle in the batch-norm engine
    overlap_load: bool = True       # weight loading overlaps computation

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "overlap_load":
                continue
            if f.name == "check_cycles":
                if value < 0:
                    raise BnnError("check_cycles must be >= 0")
            elif not value > 0:
                raise BnnError(f"{f.name} must be positive, got {value}")

    @property
    def multiplier_lanes(self) -> int:
        return self.pe_count * self.popcount_lanes


def parse_config(text: str, base: ArchConfig | None = None) -> ArchConfig:
    """Read ``key = value`` lines (``#`` starts a comment) into an ArchConfig."""
    base = base or ArchConfig()
    types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BnnError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise BnnError(f"config line {lineno}: unknown key {key!r}")
        if types[key] is bool:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise BnnError(f"config line {lineno}: {key} expects a boolean")
            updates[key] = value.lower() in ("true", "1", "yes")
        else:
            try:
                updates[key] = types[key](float(value)) if types[key] is int else types[key](value)
            except ValueError:
                raise BnnError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return replace(base, **updates)


def load_config(path: str | Path) -> ArchConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: ArchConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def oabank_address(h: int, w: int, r: int, s: int, k: int, padding: str = "none",
                   out_hw: tuple[int, int] | None = None, offset: tuple[int, int] = (1, 1)):
    """Output-bank address hit by input (h, w) through weight tap (r, s) of kernel k.

    Returns ``(h_o, w_o, k)`` or ``None`` (SKIP) when the address falls
    outside the output map. ``offset`` is the same-padding shift, 1 for
    3x3 kernels.
    """
    if padding == "same":
        ho, wo = h - r + offset[0], w - s + offset[1]
    elif padding == "none":
        ho, wo = h - r, w - s
    else:
        raise BnnError(f"unknown padding {padding!r}")
    if ho < 0 or wo < 0:
        return None
    if out_hw is not None and (ho >= out_hw[0] or wo >= out_hw[1]):
        return None
    return (ho, wo, k)


@dataclass
class SimTrace:
    layer: str
    strategy: str
    phases: dict[str, float]
    busy_multiplier_cycles: float
    baseline_ops: int
    counters: CostCounters = field(default_factory=CostCounters)

    @property
    def total_cycles(self) -> float:
        return float(sum(self.phases.values()))

    @property
    def utilization(self) -> float:
        total = self.total_cycles
        return self.busy_multiplier_cycles / total if total else 0.0

    def row(self, cfg: ArchConfig | None = None) -> dict:
        out = {"layer": self.layer, "strategy": self.strategy}
        out.update({f"{p}_cycles": self.phases[p] for p in PHASES})
        out["total_cycles"] = self.total_cycles
        out["utilization"] = self.utilization
        out.update(self.counters.as_dict())
        if cfg is not None:
            out["gops"] = estimate_fps(self, cfg, max(self.counters.bit_ops, 1)).gops
        return out


@dataclass(frozen=True)
class Throughput:
    fps: float
    gops: float


def fps_formula(multiplier_lanes: float, utilization: float, clock_hz: float, ops_per_image: float) -> float:
    if ops_per_image <= 0:
        raise BnnError("ops_per_image must be positive")
    return multiplier_lanes * utilization * clock_hz / ops_per_image


def estimate_fps(trace: SimTrace, cfg: ArchConfig, ops_per_image: float) -> Throughput:
    """Frames per second from lane count and utilization; GOPS counts nominal
    (non-reuse) operations over the simulated time."""
    fps = fps_formula(cfg.multiplier_lanes, trace.utilization, cfg.clock_hz, ops_per_image)
    seconds = trace.total_cycles / cfg.clock_hz
    gops = trace.baseline_ops / seconds / 1e9 if seconds else 0.0
    return Throughput(fps, gops)


# ---------------------------------------------------------------------------
# difference profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PixelProfile:
    """Per input pixel: broadcast element count and weight words touched."""

    diffs: np.ndarray   # (H, W) changed channels (c where the chain restarts)
    words: np.ndarray   # (H, W) weight words containing a changed channel
    starts: int         # chain starts (full computations)


@dataclass(frozen=True)
class KernelProfile:
    """Per executed kernel: differing weight positions and mask words."""

    diffs: np.ndarray   # (k,) r*s*c for partition heads
    words: np.ndarray   # (k,) nonzero mask words
    ia_words: np.ndarray
    starts: int


def pixel_profile(x: BinaryTensor | FixedTensor, row_reset: bool = True) -> PixelProfile:
    c = x.c
    if isinstance(x, BinaryTensor):
        words = x.words
        changed = unpack_bits(words[:, 1:] ^ words[:, :-1], c)
        wrap = unpack_bits(words[1:, 0] ^ words[:-1, -1], c)
    else:
        v = x.values
        changed = v[:, 1:] != v[:, :-1]
        wrap = v[1:, 0] != v[:-1, -1]
    nwords = words_for(c)
    pad = nwords * WORD_BITS - c

    def word_hits(mask):
        if pad:
            widths = [(0, 0)] * (mask.ndim - 1) + [(0, pad)]
            mask = np.pad(mask, widths)
        return mask.reshape(*mask.shape[:-1], nwords, WORD_BITS).any(axis=-1).sum(axis=-1)

    diffs = np.empty((x.h, x.w), dtype=np.int64)
    hits = np.empty((x.h, x.w), dtype=np.int64)
    diffs[:, 1:] = changed.sum(axis=-1)
    hits[:, 1:] = word_hits(changed)
    diffs[:, 0], hits[:, 0] = c, nwords
    starts = x.h
    if not row_reset and x.h > 1:
        diffs[1:, 0] = wrap.sum(axis=-1)
        hits[1:, 0] = word_hits(wrap)
        starts = 1
    return PixelProfile(diffs, hits, starts)


def uniform_pixel_profile(h: int, w: int, c: int, similarity: float) -> PixelProfile:
    """Every non-initial pixel changes round((1 - similarity) * c) channels."""
    if not 0.0 <= similarity <= 1.0:
        raise BnnError("similarity must lie in [0, 1]")
    d = int(round((1.0 - similarity) * c))
    diffs = np.full((h, w), d, dtype=np.int64)
    diffs[:, 0] = c
    nwords = words_for(c)
    # contiguous changed channels: the fewest words able to hold them
    hits = np.full((h, w), words_for(d), dtype=np.int64)
    hits[:, 0] = nwords
    return PixelProfile(diffs, hits, h)


def kernel_profile(layer: LayerSpec, plan: ReorderPlan, x=None) -> KernelProfile:
    ks = layer.weights
    plan.validate(ks.k)
    order = plan.revert
    words = ks.words[order]
    masks = words[1:] ^ words[:-1]
    per = ks.r * ks.s * ks.c
    diffs = np.empty(ks.k, dtype=np.int64)
    hits = np.empty(ks.k, dtype=np.int64)
    diffs[1:] = np.bitwise_count(masks).reshape(ks.k - 1, -1).sum(axis=1)
    hits[1:] = np.count_nonzero(masks.reshape(ks.k - 1, -1), axis=1)
    per_word = WORD_BITS if x is None else ia_elements_per_word(x)
    ia = hits.copy()
    if per_word != WORD_BITS and ks.k > 1:
        bits = unpack_bits(masks, ks.c)  # (k-1, r, s, c)
        groups = -(-ks.c // per_word)
        padded = np.zeros(bits.shape[:-1] + (groups * per_word,), dtype=bool)
        padded[..., :ks.c] = bits
        ia[1:] = padded.reshape(ks.k - 1, ks.r * ks.s, groups, per_word).any(axis=-1).sum(axis=(1, 2))
    heads = plan.boundaries
    diffs[heads] = per
    hits[heads] = ks.r * ks.s * ks.nwords
    ia[heads] = ks.r * ks.s * -(-ks.c // per_word)
    return KernelProfile(diffs, hits, ia, len(heads))


def uniform_kernel_profile(r: int, s: int, c: int, k: int, similarity: float,
                           partition_size: int = 64) -> KernelProfile:
    if not 0.0 <= similarity <= 1.0:
        raise BnnError("similarity must lie in [0, 1]")
    per = r * s * c
    d = int(round((1.0 - similarity) * per))
    diffs = np.full(k, d, dtype=np.int64)
    hits = np.full(k, min(r * s * words_for(c), words_for(d)), dtype=np.int64)
    size = min(partition_size, k)
    heads = np.arange(0, k, size)
    diffs[heads] = per
    hits[heads] = r * s * words_for(c)
    return KernelProfile(diffs, hits, hits.copy(), len(heads))


# ---------------------------------------------------------------------------
# cycle model
# ---------------------------------------------------------------------------

def _layer_dims(layer: LayerSpec, in_dims):
    ks = layer.weights
    h, w, c = in_dims
    if c != ks.c:
        raise BnnError(f"channel mismatch: input has {c}, layer expects {ks.c}")
    ho, wo = layer.output_hw(h, w)
    return h, w, ho, wo


def _finish(name, strategy, cfg, layer, ho, wo, check, bcast, pe, busy, extra_norm, counters, extra_bytes=0.0):
    ks = layer.weights
    weight_bytes = ks.r * ks.s * ks.c * ks.k / 8 + extra_bytes
    load = weight_bytes / cfg.offchip_bandwidth
    normalize = math.ceil(ho * wo * ks.k / cfg.normalize_lanes) * (1 + extra_norm)
    compute = check + bcast + pe + normalize
    exposed = max(0.0, load - compute) if cfg.overlap_load else load
    phases = {"load": float(exposed), "check": float(check), "broadcast": float(bcast),
              "accumulate": float(pe), "normalize": float(normalize)}
    baseline_ops = ho * wo * ks.r * ks.s * ks.c * ks.k
    return SimTrace(name, strategy, phases, float(busy), baseline_ops, counters)


def _simulate_input_arch(layer: LayerSpec, in_dims, prof: PixelProfile, reuse: bool,
                         cfg: ArchConfig, elem_bits: int, ia_words: int) -> SimTrace:
    ks = layer.weights
    r, s, c, k = ks.dims
    h, w, ho, wo = _layer_dims(layer, in_dims)
    kpe = -(-k // cfg.pe_count)
    if reuse:
        diffs, hits, starts = prof.diffs, prof.words, prof.starts
    else:
        diffs = np.full((h, w), c, dtype=np.int64)
        hits = np.full((h, w), ks.nwords, dtype=np.int64)
        starts = h * w
    check = cfg.check_cycles * (h * w - starts) if reuse else 0.0
    bcast = float(np.ceil(diffs / cfg.broadcast_lanes).sum())
    per_pixel = kpe * r * s * (cfg.accumulate_cycles + diffs * elem_bits / cfg.popcount_lanes)
    pe = float(per_pixel.sum())
    ops = int(diffs.sum()) * r * s * k
    busy = ops * elem_bits / cfg.multiplier_lanes
    if reuse:
        counters = CostCounters(bit_ops=ops, weight_words_read=int(hits.sum()) * r * s * k,
                                ia_words_read=h * w * ia_words, broadcasts=int(diffs.sum()),
                                full_computations=starts * r * s * k)
    else:
        dots = ho * wo * k
        counters = CostCounters(bit_ops=dots * r * s * c, weight_words_read=dots * r * s * ks.nwords,
                                ia_words_read=dots * r * s * ia_words, broadcasts=0, full_computations=dots)
    return _finish(layer.name, "input_reuse" if reuse else "baseline", cfg, layer, ho, wo,
                   check, bcast, pe, busy, 0, counters)


def _simulate_weight_arch(layer: LayerSpec, in_dims, prof: KernelProfile, cfg: ArchConfig,
                          elem_bits: int, seq_bits: int) -> SimTrace:
    ks = layer.weights
    r, s, c, k = ks.dims
    h, w, ho, wo = _layer_dims(layer, in_dims)
    rpe = -(-ho // cfg.pe_count)
    npos = ho * wo
    check = cfg.check_cycles * (k - prof.starts)
    bcast = float(np.ceil(prof.diffs / cfg.broadcast_lanes).sum())
    per_kernel = rpe * wo * (r * s * cfg.accumulate_cycles + prof.diffs * elem_bits / cfg.popcount_lanes)
    pe = float(per_kernel.sum())
    ops = int(prof.diffs.sum()) * npos
    busy = ops * elem_bits / cfg.multiplier_lanes
    counters = CostCounters(bit_ops=ops, weight_words_read=int(prof.words.sum()) * npos,
                            ia_words_read=int(prof.ia_words.sum()) * npos,
                            broadcasts=int(prof.diffs.sum()), full_computations=prof.starts * npos)
    # extra batch-norm engine passes: partial-sum reduction over kernel rows, then ofmap revert
    extra = (r - 1) + 1
    return _finish(layer.name, "weight_reuse", cfg, layer, ho, wo, check, bcast, pe, busy, extra,
                   counters, extra_bytes=seq_bits / 8)


def _elem_bits(x) -> int:
    return x.total_bits if isinstance(x, FixedTensor) else 1


def simulate_layer(layer: LayerSpec, x: BinaryTensor | FixedTensor, strategy: str,
                   cfg: ArchConfig | None = None, plan: ReorderPlan | None = None,
                   row_reset: bool = True) -> SimTrace:
    """Cycle trace of one convolution on a concrete input tensor."""
    cfg = cfg or ArchConfig()
    if strategy not in STRATEGIES:
        raise BnnError(f"unknown strategy {strategy!r}")
    if strategy == "weight_reuse":
        if plan is None:
            raise PlanError("weight_reuse simulation needs a reorder plan")
        prof = kernel_profile(layer, plan, x)
        return _simulate_weight_arch(layer, x.dims, prof, cfg, _elem_bits(x), plan.sequence_bits())
    prof = pixel_profile(x, row_reset) if strategy == "input_reuse" else None
    return _simulate_input_arch(layer, x.dims, prof, strategy == "input_reuse", cfg,
                                _elem_bits(x), ia_words_per_pixel(x))


def simulate_operating_point(layer: LayerSpec, in_dims, strategy: str, cfg: ArchConfig | None = None,
                             input_sim: float = 0.0, kernel_sim: float = 0.0,
                             partition_size: int = 64, elem_bits: int = 1) -> SimTrace:
    """Cycle trace at a prescribed similarity instead of a concrete tensor."""
    cfg = cfg or ArchConfig()
    ks = layer.weights
    h, w, c = in_dims
    if strategy == "weight_reuse":
        prof = uniform_kernel_profile(ks.r, ks.s, ks.c, ks.k, kernel_sim, partition_size)
        size = min(partition_size, ks.k)
        seq_bits = ks.k * max(1, math.ceil(math.log2(max(size, 2))))
        return _simulate_weight_arch(layer, in_dims, prof, cfg, elem_bits, seq_bits)
    if strategy not in STRATEGIES:
        raise BnnError(f"unknown strategy {strategy!r}")
    prof = uniform_pixel_profile(h, w, c, input_sim)
    ia_words = words_for(c * elem_bits)
    return _simulate_input_arch(layer, in_dims, prof, strategy == "input_reuse", cfg, elem_bits, ia_words)


# ---------------------------------------------------------------------------
# model level
# ---------------------------------------------------------------------------

def _conv_inputs(m: ModelSpec):
    dims = m.layer_inputs()
    for i in m.conv_indices():
        h, w, c, act = dims[i]
        bits = m.input.total_bits if act == "fixed" else 1
        yield i, m.layers[i], (h, w, c), bits


def total_cycles(traces: Iterable[SimTrace]) -> float:
    return float(sum(t.total_cycles for t in traces))


def simulate_model_at(m: ModelSpec, strategy: str, cfg: ArchConfig | None = None,
                      input_sim: float = 0.0, kernel_sim: float = 0.0,
                      partition_size: int = 64) -> list[SimTrace]:
    """One trace per conv layer with every layer at the same operating point."""
    return [simulate_operating_point(layer, dims, strategy, cfg, input_sim, kernel_sim, partition_size, bits)
            for _, layer, dims, bits in _conv_inputs(m)]


def _prefer(input_speedup: float, weight_speedup: float, tie_tolerance: float) -> str:
    if input_speedup >= weight_speedup * (1.0 - tie_tolerance):
        return "input_reuse"
    return "weight_reuse"


def speedup_curve(m: ModelSpec, kernel_sim: float, cfg: ArchConfig | None = None,
                  grid: Sequence[float] | None = None, partition_size: int = 64,
                  tie_tolerance: float = TIE_TOLERANCE) -> list[dict]:
    """Speedup over the baseline against input similarity, for both strategies."""
    cfg = cfg or ArchConfig()
    grid = np.round(np.linspace(0.0, 1.0, 101), 6) if grid is None else grid
    base = total_cycles(simulate_model_at(m, "baseline", cfg))
    wr = base / total_cycles(simulate_model_at(m, "weight_reuse", cfg, kernel_sim=kernel_sim,
                                               partition_size=partition_size))
    rows = []
    for s in grid:
        ir = base / total_cycles(simulate_model_at(m, "input_reuse", cfg, input_sim=float(s)))
        rows.append({"input_similarity": float(s), "kernel_similarity": kernel_sim,
                     "input_reuse_speedup": ir, "weight_reuse_speedup": wr,
                     "preferred": _prefer(ir, wr, tie_tolerance)})
    return rows


def crossover_threshold(curve: Sequence[dict]) -> float | None:
    """Smallest input similarity on the grid where input reuse is preferred."""
    for row in curve:
        if row["preferred"] == "input_reuse":
            return row["input_similarity"]
    return None


@dataclass
class StrategyDecision:
    strategy: str
    input_similarity: float
    kernel_similarity: float
    input_reuse_speedup: float
    weight_reuse_speedup: float
    crossover: float | None
    curve: list[dict] = field(default_factory=list)

    def evidence(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "curve"}


def select_at(m: ModelSpec, input_sim: float, kernel_sim: float, cfg: ArchConfig | None = None,
              partition_size: int = 64, tie_tolerance: float = TIE_TOLERANCE) -> StrategyDecision:
    """Pick the strategy with the larger simulated speedup.

    Speedups within ``tie_tolerance`` of each other are a tie and go to
    input reuse.
    """
    cfg = cfg or ArchConfig()
    base = total_cycles(simulate_model_at(m, "baseline", cfg))
    ir = base / total_cycles(simulate_model_at(m, "input_reuse", cfg, input_sim=input_sim))
    wr = base / total_cycles(simulate_model_at(m, "weight_reuse", cfg, kernel_sim=kernel_sim,
                                               partition_size=partition_size))
    curve = speedup_curve(m, kernel_sim, cfg, partition_size=partition_size, tie_tolerance=tie_tolerance)
    choice = _prefer(ir, wr, tie_tolerance)
    return StrategyDecision(choice, input_sim, kernel_sim, ir, wr, crossover_threshold(curve), curve)


def select_strategy(m: ModelSpec, images: Sequence, cfg: ArchConfig | None = None,
                    plan_partitions: int = 1, partition_size: int = 64) -> StrategyDecision:
    """Measure similarities on calibration images, then decide via :func:`select_at`.

    Input similarity is the dataset average over model inputs; kernel
    similarity is pooled over conv layers in reordered execution order
    (plans are generated where the model has none).
    """
    from .similarity import dataset_report, plan_kernel_similarity

    images = list(images)
    if not images:
        raise BnnError("strategy selection needs at least one calibration image")
    report = dataset_report(m, images)
    input_sim = report.headline.avg
    pairs = matches = 0
    for i in m.conv_indices():
        ks = m.layers[i].weights
        plan = m.plans.get(i) or make_reorder_plan(ks, plan_partitions, partition_size)
        if plan.k == plan.K:
            continue
        st = plan_kernel_similarity(ks, plan)
        pairs += st.compared_pairs
        matches += st.matches
    kernel_sim = matches / pairs if pairs else 0.0
    return select_at(m, input_sim, kernel_sim, cfg, partition_size)


INPUT_CLASSES = {"max": "constant", "img": "smooth", "rand": "noise"}


def class_speedups(m: ModelSpec, cfg: ArchConfig | None = None, seed: int = 0,
                   row_reset: bool = True) -> list[dict]:
    """Input-reuse speedup of every conv layer fed synthetic inputs of each class.

    ``max`` is a constant input, ``img`` a smooth image-like ramp and
    ``rand`` iid noise, each generated at the layer's own input dims.
    """
    from .model import gen_input

    cfg = cfg or ArchConfig()
    rows = []
    for i, layer, dims, bits in _conv_inputs(m):
        fixed = (m.input.total_bits, m.input.frac_bits) if layer.kind == "fixconv" else None
        row = {"layer": layer.name or f"layer{i}"}
        for label, kind in INPUT_CLASSES.items():
            x = gen_input(kind, dims, seed + i, fixed=fixed)
            base = simulate_layer(layer, x, "baseline", cfg)
            reuse = simulate_layer(layer, x, "input_reuse", cfg, row_reset=row_reset)
            row[f"{label}_speedup"] = base.total_cycles / reuse.total_cycles
            row[f"{label}_gops"] = estimate_fps(reuse, cfg, base.baseline_ops).gops
        rows.append(row)
    return rows
