import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnreuse.bittensor import BinaryKernelSet
from bnnreuse.errors import BnnError, PlanError
from bnnreuse.model import load_model, shipped_model_path
from bnnreuse.reorder import (
    DissimGraph,
    ReorderPlan,
    build_graph,
    greedy_hamiltonian,
    make_reorder_plan,
    partition_graph,
)
from bnnreuse.similarity import kernel_similarity, plan_kernel_similarity


def kernel_set(*vectors):
    arr = np.asarray(vectors, np.int8).T.reshape(1, 1, -1, len(vectors))
    return BinaryKernelSet.from_pm1(arr)


def random_kernels(rng, k, c=16, r=3, s=3):
    return BinaryKernelSet.from_pm1(np.where(rng.random((r, s, c, k)) < 0.5, -1, 1).astype(np.int8))


def brute_path(d):
    n = len(d)
    return min(sum(d[p[i], p[i + 1]] for i in range(n - 1)) for p in itertools.permutations(range(n)))


def brute_partition_intra(d, K):
    n = len(d)
    size = n // K
    best = None
    for perm in itertools.permutations(range(n)):
        groups = [perm[i:i + size] for i in range(0, n, size)]
        cost = sum(d[a, b] for g in groups for a, b in itertools.combinations(g, 2))
        best = cost if best is None else min(best, cost)
    return best


def intra(d, groups):
    return sum(d[a, b] for g in groups for a, b in itertools.combinations(g, 2))


def test_build_graph_examples():
    a = [1, 1, -1, -1]
    g = build_graph(kernel_set(a, a, [-x for x in a], [1, -1, -1, -1]))
    w = g.weights
    assert w[0, 1] == 0 and w[0, 2] == 1 and w[0, 3] == 0.25
    assert np.array_equal(w, w.T) and np.all(np.diag(w) == 0)
    with pytest.raises(BnnError):
        build_graph(kernel_set(a))


def test_dissim_graph_validation():
    with pytest.raises(BnnError):
        DissimGraph(np.array([[0, 1], [2, 0]]))
    with pytest.raises(BnnError):
        DissimGraph(np.array([[1, 0], [0, 0]]))


def test_partition_example_four_vertices():
    w = np.full((4, 4), 0.9)
    np.fill_diagonal(w, 0)
    w[0, 1] = w[1, 0] = w[2, 3] = w[3, 2] = 0.1
    assert partition_graph(DissimGraph.from_weights(w), 2) == [[0, 1], [2, 3]]


def test_partition_trivial_cases():
    g = DissimGraph.from_weights(np.ones((6, 6)) - np.eye(6))
    assert partition_graph(g, 1) == [list(range(6))]
    assert partition_graph(g, 3) == [[0, 1], [2, 3], [4, 5]]  # tie: first index wins
    with pytest.raises(BnnError):
        partition_graph(g, 4)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 2), (6, 2), (6, 3), (8, 2), (8, 4)]))
def test_partition_exact_for_small_graphs(seed, nk):
    n, K = nk
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 20, size=(n, n))
    d = np.triu(d, 1) + np.triu(d, 1).T
    groups = partition_graph(DissimGraph(d), K)
    assert sorted(v for g in groups for v in g) == list(range(n))
    assert all(len(g) == n // K for g in groups)
    if n <= 6:
        assert intra(d, groups) == brute_partition_intra(d, K)


@given(st.integers(0, 2**32 - 1))
def test_partition_swap_local_optimum(seed):
    rng = np.random.default_rng(seed)
    n, K = 16, 4
    d = rng.integers(0, 50, size=(n, n))
    d = np.triu(d, 1) + np.triu(d, 1).T
    groups = partition_graph(DissimGraph(d), K)
    cost = intra(d, groups)
    start = [list(range(i, i + 4)) for i in range(0, n, 4)]
    assert cost <= intra(d, start)
    for gi, gj in itertools.combinations(range(K), 2):
        for u in groups[gi]:
            for v in groups[gj]:
                swapped = [list(g) for g in groups]
                swapped[gi][swapped[gi].index(u)] = v
                swapped[gj][swapped[gj].index(v)] = u
                assert intra(d, swapped) >= cost


def test_hamiltonian_examples():
    w = np.array([[0, 0.25, 0.5], [0.25, 0, 0.25], [0.5, 0.25, 0]])
    path, cost = greedy_hamiltonian(DissimGraph.from_weights(w))
    assert path in ([0, 1, 2], [2, 1, 0]) and cost == 0.5
    assert greedy_hamiltonian(DissimGraph.from_weights(w), [1]) == ([1], 0.0)
    with pytest.raises(BnnError):
        greedy_hamiltonian(DissimGraph.from_weights(w), [])


@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_hamiltonian_between_optimum_and_identity(seed, n):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 30, size=(n, n))
    d = np.triu(d, 1) + np.triu(d, 1).T
    g = DissimGraph(d)
    path, cost = greedy_hamiltonian(g)
    assert sorted(path) == list(range(n))
    assert cost == g.path_cost(path)
    assert brute_path(d) <= cost <= g.path_cost(range(n))


def test_hamiltonian_fallback_to_identity():
    # nearest neighbour from every start costs 119 here; the given order costs 114
    d = np.array([[0, 71, 46, 80, 45], [71, 0, 4, 76, 46], [46, 4, 0, 7, 3],
                  [80, 76, 7, 0, 32], [45, 46, 3, 32, 0]])
    path, cost = greedy_hamiltonian(DissimGraph(d))
    assert (path, cost) == ([0, 1, 2, 3, 4], 114.0)
    path, cost = greedy_hamiltonian(DissimGraph(d), [4, 3, 2, 1, 0])
    assert cost <= 114.0


def test_conv5_block_plan_shape():
    ks = load_model(shipped_model_path()).layers[6].weights
    block = ks.take(range(64))
    plan = make_reorder_plan(block, 8)
    assert plan.K == 8 and all(len(p) == 8 for p in plan.partitions)
    whole = make_reorder_plan(ks, 1)
    assert whole.K == 8 and whole.max_range == 64
    assert whole.sequence_bits() == 512 * 6


def test_duplicate_kernels_zero_chain_cost():
    v = [1, -1, 1, 1]
    plan = make_reorder_plan(kernel_set(*([v] * 8)), 2)
    assert plan.chain_cost == 0.0


def test_plan_constraints():
    rng = np.random.default_rng(0)
    ks = random_kernels(rng, 12)
    with pytest.raises(BnnError):
        make_reorder_plan(ks, 5, block_size=None)
    with pytest.raises(BnnError):
        make_reorder_plan(random_kernels(rng, 128, c=2, r=1, s=1), 1, block_size=None)
    with pytest.raises(BnnError):
        make_reorder_plan(ks, 2, block_size=5)
    plan = make_reorder_plan(ks, 3, block_size=None)
    with pytest.raises(PlanError):
        plan.validate(13)
    with pytest.raises(PlanError):
        ReorderPlan(((0, 1), (1, 2)), 0.0).validate(4)


def test_plan_is_deterministic():
    rng = np.random.default_rng(7)
    ks = random_kernels(rng, 32)
    assert make_reorder_plan(ks, 4) == make_reorder_plan(ks, 4)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(16, 2, None), (16, 1, 8), (32, 4, 16), (24, 3, None)]))
def test_plan_never_worse_than_identity(seed, cfg):
    k, K, block = cfg
    rng = np.random.default_rng(seed)
    ks = random_kernels(rng, k, c=8, r=1, s=2)
    plan = make_reorder_plan(ks, K, block)
    plan.validate(k)
    size = k // len(plan.partitions)
    ident = ReorderPlan.identity(k, size)
    g = build_graph(ks)
    assert plan.chain_cost == pytest.approx(sum(g.path_cost(p) for p in plan.partitions))
    assert plan.chain_cost <= sum(g.path_cost(p) for p in ident.partitions) + 1e-12
    assert plan_kernel_similarity(ks, plan).ratio >= plan_kernel_similarity(ks, ident).ratio


def test_reordering_raises_similarity_of_random_set():
    rng = np.random.default_rng(3)
    ks = random_kernels(rng, 16)
    plan = make_reorder_plan(ks, 2, block_size=None)
    assert plan_kernel_similarity(ks, plan).ratio >= kernel_similarity(ks, boundaries=[8]).ratio


def test_sequence_bits_overhead_of_shipped_model():
    m = load_model(shipped_model_path())
    seq = sum(p.sequence_bits() for p in m.plans.values())
    weights = sum(m.layers[i].weights.r * m.layers[i].weights.s * m.layers[i].weights.c * m.layers[i].weights.k
                  for i in m.conv_indices())
    assert seq == 1664 * 6
    assert seq / weights < 0.0025
