import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnreuse.bittensor import BinaryKernelSet, BinaryTensor, FixedTensor
from bnnreuse.engine import infer
from bnnreuse.errors import BnnError
from bnnreuse.model import gen_input, gen_synthetic_model
from bnnreuse.reorder import make_reorder_plan
from bnnreuse.similarity import (
    REPORT_COLUMNS,
    SimilarityStats,
    dataset_report,
    input_similarity,
    kernel_similarity,
)


def brute_input_similarity(vals):
    h, w, c = vals.shape
    matches = sum(vals[i, j, k] == vals[i, j - 1, k] for i in range(h) for j in range(1, w) for k in range(c))
    return matches, h * (w - 1) * c


def test_input_similarity_hand_example():
    cols = np.array([[1, -1], [1, 1], [1, 1]]).reshape(1, 3, 2)
    st_ = input_similarity(BinaryTensor.from_pm1(cols))
    assert (st_.matches, st_.compared_pairs, st_.ratio) == (3, 4, 0.75)


def test_input_similarity_extremes():
    assert input_similarity(gen_input("constant", (3, 5, 70), seed=0)).ratio == 1.0
    alt = np.ones((2, 6, 3))
    alt[:, 1::2] = -1
    assert input_similarity(BinaryTensor.from_pm1(alt)).ratio == 0.0
    with pytest.raises(BnnError):
        input_similarity(gen_input("constant", (3, 1, 4), seed=0))


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_input_similarity_matches_enumeration(seed, fixed):
    rng = np.random.default_rng(seed)
    dims = (int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 70)))
    if fixed:
        vals = rng.integers(-2, 2, size=dims)
        t = FixedTensor.from_raw(vals, 4, 1)
    else:
        vals = np.where(rng.random(dims) < 0.5, -1, 1)
        t = BinaryTensor.from_pm1(vals)
    s = input_similarity(t)
    assert (s.matches, s.compared_pairs) == brute_input_similarity(vals)


def test_kernel_similarity_hand_example():
    k = np.array([[1, 1, -1, -1], [1, -1, -1, -1], [1, -1, -1, 1]]).T.reshape(1, 1, 4, 3)
    s = kernel_similarity(BinaryKernelSet.from_pm1(k))
    assert (s.matches, s.compared_pairs) == (6, 8)
    dup = BinaryKernelSet.from_pm1(np.repeat(k[..., :1], 5, axis=-1))
    assert kernel_similarity(dup).ratio == 1.0


def test_kernel_similarity_order_and_boundaries():
    rng = np.random.default_rng(0)
    arr = np.where(rng.random((2, 2, 10, 6)) < 0.5, -1, 1)
    ks = BinaryKernelSet.from_pm1(arr)
    order = [3, 1, 5, 0, 2, 4]
    s = kernel_similarity(ks, order, [3])
    flat = arr.reshape(-1, 6)
    pairs = [(3, 1), (1, 5), (0, 2), (2, 4)]
    assert s.compared_pairs == 4 * 40
    assert s.matches == sum(int((flat[:, a] == flat[:, b]).sum()) for a, b in pairs)
    with pytest.raises(BnnError):
        kernel_similarity(ks, [0, 0, 1, 2, 3, 4])
    with pytest.raises(BnnError):
        kernel_similarity(ks, None, [9])


@given(st.integers(0, 2**32 - 1))
def test_kernel_similarity_is_one_minus_chain_hamming(seed):
    rng = np.random.default_rng(seed)
    arr = np.where(rng.random((3, 3, 7, 8)) < 0.5, -1, 1)
    ks = BinaryKernelSet.from_pm1(arr)
    order = rng.permutation(8)
    s = kernel_similarity(ks, order)
    flat = arr.reshape(-1, 8)[:, order]
    ham = np.mean(flat[:, 1:] != flat[:, :-1])
    assert 0.0 <= s.ratio <= 1.0
    assert s.ratio == pytest.approx(1 - ham)


def test_random_kernels_near_half():
    rng = np.random.default_rng(11)
    ks = BinaryKernelSet.from_pm1(np.where(rng.random((3, 3, 256, 64)) < 0.5, -1, 1))
    assert abs(kernel_similarity(ks).ratio - 0.5) <= 0.02


def test_stats_validation_and_merge():
    with pytest.raises(BnnError):
        SimilarityStats(0, 0)
    with pytest.raises(BnnError):
        SimilarityStats(4, 5)
    total = SimilarityStats(4, 3) + SimilarityStats(6, 1)
    assert (total.compared_pairs, total.matches) == (10, 4)


def small_model():
    m = gen_synthetic_model((16, 16, 32), [("conv", 3, 3, 32, 16), "pool", ("conv", 3, 3, 16, 16)], seed=0)
    return m.with_plans({0: make_reorder_plan(m.layers[0].weights, 2)})


def test_dataset_report_constant_and_noise():
    m = small_model()
    rep = dataset_report(m, [gen_input("constant", (16, 16, 32), seed=0)] * 2)
    row = rep.rows()[0]
    assert (row["min_input_sim"], row["avg_input_sim"], row["max_input_sim"]) == (1.0, 1.0, 1.0)
    assert list(row) == REPORT_COLUMNS
    assert [r["layer"] for r in rep.rows()] == ["input", "conv1", "conv2"]
    noise = dataset_report(m, [gen_input("noise", (16, 16, 32), seed=s) for s in range(3)])
    assert abs(noise.headline.avg - 0.5) <= 0.03
    assert noise.layers[0].kernel_post is not None and noise.layers[1].kernel_post is None
    assert noise.kernel_post.ratio >= 0.0


def test_dataset_report_vstripes_and_limit():
    m = small_model()
    imgs = [gen_input("vstripes", (16, 16, 32), seed=s, p=0.786) for s in range(6)]
    rep = dataset_report(m, imgs, sample_limit=4)
    assert rep.images == 4 and len(rep.headline.per_image) == 4
    assert abs(rep.headline.avg - 0.786) <= 0.02
    assert rep.headline.min <= rep.headline.avg <= rep.headline.max
    with pytest.raises(BnnError):
        dataset_report(m, [])


def test_layer_inputs_measured_on_flowing_activations():
    m = small_model()
    x = gen_input("smooth", (16, 16, 32), seed=1)
    res = infer(m, x, keep_activations=True)
    rep = dataset_report(m, [x])
    assert rep.layers[1].per_image[0] == input_similarity(res.activations[2]).ratio
