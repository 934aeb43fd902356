"""Offline kernel reordering for weight reuse.

Pipeline per layer: build a dissimilarity graph over kernels, split it into
K equal-size groups that maximise the inter-group dissimilarity, then order
each group along a short Hamiltonian path so consecutive kernels differ in
as few positions as possible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bittensor import BinaryKernelSet
from .errors import BnnError, PlanError

MAX_REORDER_RANGE = 64
_EXHAUSTIVE_LIMIT = 8


@dataclass(frozen=True, eq=False)
class DissimGraph:
    """Dense symmetric dissimilarity matrix over kernels.

    ``diff`` holds raw differing-position counts (or arbitrary non-negative
    costs) and ``params`` the normaliser, so that ``weights = diff / params``.
    Integer counts keep every comparison in the optimiser exact.
    """

    diff: np.ndarray
    params: int = 1

    def __post_init__(self):
        d = self.diff
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise BnnError("dissimilarity matrix must be square")
        if np.any(np.diag(d) != 0) or not np.array_equal(d, d.T):
            raise BnnError("dissimilarity matrix must be symmetric with a zero diagonal")

    @classmethod
    def from_weights(cls, w) -> "DissimGraph":
        return cls(np.asarray(w, dtype=np.float64), 1)

    @property
    def n(self) -> int:
        return self.diff.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return self.diff / self.params

    def path_cost(self, path) -> float:
        return float(self.raw_path_cost(path)) / self.params

    def raw_path_cost(self, path):
        path = np.asarray(path, dtype=np.int64)
        if len(path) < 2:
            return self.diff.dtype.type(0)
        return self.diff[path[:-1], path[1:]].sum()

    def subgraph(self, vertices) -> "DissimGraph":
        v = np.asarray(vertices, dtype=np.int64)
        return DissimGraph(self.diff[np.ix_(v, v)], self.params)


@dataclass(frozen=True, eq=False)
class ReorderPlan:
    """Execution order of a layer's kernels, split into reorder partitions.

    ``revert[j]`` is the original kernel index whose ofmap is produced at
    execution position ``j``.
    """

    partitions: tuple[tuple[int, ...], ...]
    chain_cost: float = 0.0

    @property
    def K(self) -> int:
        return len(self.partitions)

    @property
    def k(self) -> int:
        return sum(len(p) for p in self.partitions)

    @property
    def revert(self) -> np.ndarray:
        return np.fromiter(itertools.chain.from_iterable(self.partitions), dtype=np.int64, count=self.k)

    @property
    def boundaries(self) -> list[int]:
        """Execution positions at which a new partition starts."""
        starts, pos = [], 0
        for p in self.partitions:
            starts.append(pos)
            pos += len(p)
        return starts

    @property
    def max_range(self) -> int:
        return max((len(p) for p in self.partitions), default=0)

    def sequence_bits(self) -> int:
        """On-chip bits needed to store the permutation (index within range)."""
        bits = max(1, int(np.ceil(np.log2(max(self.max_range, 2)))))
        return self.k * bits

    def validate(self, k: int) -> None:
        if self.k != k:
            raise PlanError(f"plan covers {self.k} kernels, layer has {k}")
        if any(len(p) == 0 for p in self.partitions):
            raise PlanError("empty partition")
        if not np.array_equal(np.sort(self.revert), np.arange(k)):
            raise PlanError("plan order is not a permutation of the kernel indices")

    @classmethod
    def identity(cls, k: int, partition_size: int | None = None) -> "ReorderPlan":
        size = min(partition_size or MAX_REORDER_RANGE, k)
        parts = tuple(tuple(range(i, min(i + size, k))) for i in range(0, k, size))
        return cls(parts, 0.0)

    def __eq__(self, other):
        if not isinstance(other, ReorderPlan):
            return NotImplemented
        return self.partitions == other.partitions and self.chain_cost == other.chain_cost

    def __repr__(self):
        return f"ReorderPlan(k={self.k}, K={self.K}, chain_cost={self.chain_cost:.4f})"


def build_graph(ks: BinaryKernelSet) -> DissimGraph:
    """Pairwise Hamming distances between flattened kernels."""
    if ks.k < 2:
        raise BnnError("need at least two kernels to build a graph")
    words = ks.words.reshape(ks.k, -1)
    diff = np.bitwise_count(words[:, None, :] ^ words[None, :, :]).sum(axis=-1, dtype=np.int64)
    return DissimGraph(diff, ks.r * ks.s * ks.c)


def _intra_cost(d: np.ndarray, labels: np.ndarray) -> float:
    same = labels[:, None] == labels[None, :]
    return d[same].sum() / 2


def _balanced_partitions(n: int, K: int):
    """Every balanced K-way partition of range(n), each yielded once.

    Canonical form: groups ordered by their smallest element, which also
    gives the first-index tie-break.
    """
    size = n // K

    def rec(remaining):
        if not remaining:
            yield []
            return
        head, rest = remaining[0], remaining[1:]
        for combo in itertools.combinations(rest, size - 1):
            group = (head,) + combo
            left = [v for v in rest if v not in combo]
            for tail in rec(left):
                yield [group] + tail

    yield from rec(list(range(n)))


def partition_graph(g: DissimGraph, K: int) -> list[list[int]]:
    """Split the graph into K equal groups maximising inter-group weight.

    Exact enumeration up to 8 vertices; above that, pairwise swap
    hill-climbing (Kernighan-Lin style) from contiguous chunks. Maximising
    the inter-group sum is the same as minimising the intra-group sum.
    """
    n = g.n
    if K < 1 or n % K:
        raise BnnError(f"K={K} does not divide {n} vertices")
    if K == 1:
        return [list(range(n))]
    d = g.diff
    if n <= _EXHAUSTIVE_LIMIT:
        best, best_cost = None, None
        for parts in _balanced_partitions(n, K):
            labels = np.empty(n, dtype=np.int64)
            for i, grp in enumerate(parts):
                labels[list(grp)] = i
            cost = _intra_cost(d, labels)
            if best_cost is None or cost < best_cost:
                best, best_cost = parts, cost
        return [list(p) for p in best]

    labels = np.repeat(np.arange(K), n // K)
    onehot = np.zeros((n, K), dtype=d.dtype)
    onehot[np.arange(n), labels] = 1
    conn = d @ onehot  # conn[v, p] = summed weight from v into group p
    eps = 1e-12 * max(1.0, float(np.abs(d).max())) if np.issubdtype(d.dtype, np.floating) else 0
    for _ in range(n * n):
        own = conn[np.arange(n), labels]
        cross = conn[:, labels]  # cross[u, v] = weight from u into v's group
        # gain of swapping u and v = drop of intra-group weight
        gain = (own[:, None] + own[None, :] - cross - cross.T + 2 * d).astype(np.float64)
        gain[labels[:, None] == labels[None, :]] = -np.inf
        flat = int(np.argmax(gain))
        u, v = divmod(flat, n)
        if not gain[u, v] > eps:
            break
        lu, lv = labels[u], labels[v]
        conn[:, lu] += d[:, v] - d[:, u]
        conn[:, lv] += d[:, u] - d[:, v]
        labels[u], labels[v] = lv, lu
    groups = [sorted(np.flatnonzero(labels == p).tolist()) for p in range(K)]
    groups.sort(key=lambda grp: grp[0])
    return groups


def greedy_hamiltonian(g: DissimGraph, vertices=None) -> tuple[list[int], float]:
    """Nearest-neighbour Hamiltonian path over ``vertices``.

    Every start vertex is tried and the cheapest path kept. If that path is
    worse than simply keeping ``vertices`` in the given order, the given
    order is returned instead. Ties go to the lowest index.
    """
    if vertices is None:
        vertices = list(range(g.n))
    vertices = [int(v) for v in vertices]
    if not vertices:
        raise BnnError("empty vertex set")
    if len(vertices) == 1:
        return vertices, 0.0
    sub = g.subgraph(vertices).diff
    m = len(vertices)
    big = np.inf if np.issubdtype(sub.dtype, np.floating) else np.iinfo(np.int64).max
    best_path, best_cost = None, None
    for start in range(m):
        visited = np.zeros(m, dtype=bool)
        visited[start] = True
        path, cost, cur = [start], 0, start
        for _ in range(m - 1):
            row = np.where(visited, big, sub[cur])
            nxt = int(np.argmin(row))
            cost += sub[cur, nxt]
            visited[nxt] = True
            path.append(nxt)
            cur = nxt
        if best_cost is None or cost < best_cost:
            best_path, best_cost = path, cost
    identity_cost = sub[np.arange(m - 1), np.arange(1, m)].sum()
    if best_cost > identity_cost:
        best_path, best_cost = list(range(m)), identity_cost
    return [vertices[i] for i in best_path], float(best_cost) / g.params


def _plan_block(g: DissimGraph, vertices: list[int], K: int) -> list[list[int]]:
    sub = g.subgraph(vertices)
    groups = partition_graph(sub, K)
    paths = []
    for grp in groups:
        path, _ = greedy_hamiltonian(sub, grp)
        paths.append([vertices[i] for i in path])
    # Never return something worse than the untouched contiguous order.
    size = len(vertices) // K
    plain = [vertices[i:i + size] for i in range(0, len(vertices), size)]
    if sum(g.raw_path_cost(p) for p in paths) > sum(g.raw_path_cost(p) for p in plain):
        return plain
    return paths


def make_reorder_plan(ks: BinaryKernelSet, K: int, block_size: int | None = MAX_REORDER_RANGE) -> ReorderPlan:
    """Build the execution order for one layer.

    ``block_size`` selects how the kernel axis is cut before optimisation:
    with an integer, kernels are split into contiguous blocks of that size
    and each block is partitioned K ways; with ``None`` the whole layer is
    one graph partitioned K ways. Every partition must hold at most 64
    kernels.
    """
    k = ks.k
    block = k if block_size is None else min(block_size, k)
    if block < 1 or k % block:
        raise BnnError(f"block size {block} does not divide {k} kernels")
    if K < 1 or block % K:
        raise BnnError(f"K={K} does not divide block of {block} kernels")
    if block // K > MAX_REORDER_RANGE:
        raise BnnError(f"partition size {block // K} exceeds reorder range {MAX_REORDER_RANGE}")
    if k == 1:
        return ReorderPlan(((0,),), 0.0)
    g = build_graph(ks)
    partitions = []
    for start in range(0, k, block):
        partitions.extend(_plan_block(g, list(range(start, start + block)), K))
    raw = sum(g.raw_path_cost(p) for p in partitions)
    return ReorderPlan(tuple(tuple(p) for p in partitions), float(raw) / g.params)
