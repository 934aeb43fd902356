"""Input and kernel similarity ratios, and dataset-level similarity reports.

A similarity ratio is matches / compared pairs. Input similarity compares
every element with its left neighbour (same row, same channel); kernel
similarity compares every weight with the same position in the preceding
kernel of the execution order, never across a partition boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bittensor import BinaryKernelSet, BinaryTensor, FixedTensor
from .engine import infer
from .errors import BnnError
from .model import ModelSpec


@dataclass(frozen=True)
class SimilarityStats:
    compared_pairs: int
    matches: int

    def __post_init__(self):
        if self.compared_pairs <= 0:
            raise BnnError("similarity needs at least one compared pair")
        if not 0 <= self.matches <= self.compared_pairs:
            raise BnnError("matches must lie in [0, compared_pairs]")

    @property
    def ratio(self) -> float:
        return self.matches / self.compared_pairs

    def __add__(self, other: "SimilarityStats") -> "SimilarityStats":
        return SimilarityStats(self.compared_pairs + other.compared_pairs, self.matches + other.matches)


def input_similarity(t: BinaryTensor | FixedTensor, row_reset: bool = True) -> SimilarityStats:
    """Fraction of elements equal to their (w-1) neighbour.

    ``row_reset=False`` additionally compares the first pixel of each row
    with the last pixel of the previous row, matching the input-reuse
    engine's raster chain without row resets.
    """
    if t.w < 2:
        raise BnnError(f"input similarity needs w >= 2, got w={t.w}")
    if isinstance(t, BinaryTensor):
        bits = t.words
        same = np.bitwise_count(bits[:, 1:] ^ bits[:, :-1]).sum(dtype=np.int64)
        pairs = t.h * (t.w - 1) * t.c
        matches = pairs - int(same)
        if not row_reset and t.h > 1:
            wrap = np.bitwise_count(bits[1:, 0] ^ bits[:-1, -1]).sum(dtype=np.int64)
            pairs += (t.h - 1) * t.c
            matches += (t.h - 1) * t.c - int(wrap)
        return SimilarityStats(pairs, matches)
    v = t.values
    pairs = t.h * (t.w - 1) * t.c
    matches = int(np.count_nonzero(v[:, 1:] == v[:, :-1]))
    if not row_reset and t.h > 1:
        pairs += (t.h - 1) * t.c
        matches += int(np.count_nonzero(v[1:, 0] == v[:-1, -1]))
    return SimilarityStats(pairs, matches)


def kernel_similarity(ks: BinaryKernelSet, order: Sequence[int] | None = None,
                      boundaries: Iterable[int] | None = None) -> SimilarityStats:
    """Fraction of weights equal to the same position of the preceding kernel.

    ``boundaries`` lists positions in ``order`` where a new partition
    starts; the pair straddling a boundary is skipped. Position 0 always
    starts a partition.
    """
    order = np.arange(ks.k) if order is None else np.asarray(order, dtype=np.int64)
    if order.shape != (ks.k,) or not np.array_equal(np.sort(order), np.arange(ks.k)):
        raise BnnError("order must be a permutation of the kernel indices")
    starts = {0} | set(int(b) for b in (boundaries or ()))
    if any(not 0 <= b < ks.k for b in starts):
        raise BnnError("partition boundary outside the kernel range")
    per_kernel = ks.r * ks.s * ks.c
    words = ks.words.reshape(ks.k, -1)[order]
    keep = np.array([j not in starts for j in range(1, ks.k)], dtype=bool)
    diffs = np.bitwise_count(words[1:] ^ words[:-1]).sum(axis=1, dtype=np.int64)
    pairs = (ks.k - len(starts)) * per_kernel
    if pairs == 0:
        raise BnnError("no kernel pairs to compare (every kernel starts a partition)")
    return SimilarityStats(pairs, pairs - int(diffs[keep].sum()))


def plan_kernel_similarity(ks: BinaryKernelSet, plan) -> SimilarityStats:
    return kernel_similarity(ks, plan.revert, plan.boundaries)


@dataclass(frozen=True)
class LayerSimilarity:
    layer: str
    per_image: tuple[float, ...]
    pooled: SimilarityStats
    kernel_pre: SimilarityStats | None
    kernel_post: SimilarityStats | None

    @property
    def min(self) -> float:
        return min(self.per_image)

    @property
    def max(self) -> float:
        return max(self.per_image)

    @property
    def avg(self) -> float:
        return float(np.mean(self.per_image))


@dataclass(frozen=True)
class SimilarityReport:
    """Similarity of model inputs (headline row) and of every conv layer's input."""

    dataset: str
    network: str
    images: int
    headline: LayerSimilarity
    layers: tuple[LayerSimilarity, ...] = field(default_factory=tuple)

    @property
    def kernel_pre(self) -> SimilarityStats | None:
        return _pool([ls.kernel_pre for ls in self.layers])

    @property
    def kernel_post(self) -> SimilarityStats | None:
        return _pool([ls.kernel_post for ls in self.layers])

    def rows(self) -> list[dict]:
        """Report rows (percentages kept as ratios in [0, 1])."""
        out = []
        for ls, kpre, kpost in [(self.headline, self.kernel_pre, self.kernel_post)] + \
                [(ls, ls.kernel_pre, ls.kernel_post) for ls in self.layers]:
            out.append({
                "dataset": self.dataset,
                "network": self.network,
                "layer": ls.layer,
                "min_input_sim": ls.min,
                "avg_input_sim": ls.avg,
                "max_input_sim": ls.max,
                "kernel_sim_pre": None if kpre is None else kpre.ratio,
                "kernel_sim_post": None if kpost is None else kpost.ratio,
            })
        return out


REPORT_COLUMNS = ["dataset", "network", "layer", "min_input_sim", "avg_input_sim",
                  "max_input_sim", "kernel_sim_pre", "kernel_sim_post"]


def _pool(stats):
    stats = [s for s in stats if s is not None]
    if not stats:
        return None
    total = stats[0]
    for s in stats[1:]:
        total = total + s
    return total


def dataset_report(m: ModelSpec, images: Sequence, sample_limit: int | None = None,
                   dataset: str = "synthetic", network: str = "model") -> SimilarityReport:
    """Input similarity of each image and of the activations entering every conv layer.

    Kernel similarity is given in the original order (pre) and, where the
    model carries a reorder plan for the layer, in the plan's order (post).
    """
    images = list(images)
    if sample_limit is not None:
        images = images[:sample_limit]
    if not images:
        raise BnnError("dataset report needs at least one image")
    conv_idx = m.conv_indices()
    per_layer = {i: [] for i in conv_idx}
    headline = []
    for img in images:
        headline.append(input_similarity(img))
        res = infer(m, img, "reference", keep_activations=True)
        for i in conv_idx:
            per_layer[i].append(input_similarity(res.activations[i]))

    def summarize(name, stats, kpre=None, kpost=None):
        return LayerSimilarity(name, tuple(s.ratio for s in stats), _pool(stats), kpre, kpost)

    layers = []
    for i in conv_idx:
        layer = m.layers[i]
        ks = layer.weights
        kpre = kernel_similarity(ks) if ks.k > 1 else None
        plan = m.plans.get(i)
        kpost = None
        if plan is not None and plan.k > plan.K:
            kpost = plan_kernel_similarity(ks, plan)
        layers.append(summarize(layer.name or f"layer{i}", per_layer[i], kpre, kpost))
    return SimilarityReport(dataset, network, len(images), summarize("input", headline), tuple(layers))
