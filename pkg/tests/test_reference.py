import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnnreuse.bittensor import BinaryKernelSet, BinaryTensor, FixedTensor
from bnnreuse.counters import CostCounters
from bnnreuse.engine import ActivationBuffers, infer
from bnnreuse.errors import BnnError, PlanError, ShapeError
from bnnreuse.model import LayerSpec, gen_input, gen_synthetic_model, load_model, shipped_model_path
from bnnreuse.reference import conv_reference, maxpool2x2, normalize_binarize

from conftest import oracle_conv, random_input, random_layer, tensor_values


def one_by_one(kernel):
    ks = BinaryKernelSet.from_pm1(np.asarray(kernel, np.int8).reshape(1, 1, -1, 1))
    return LayerSpec("binconv", ks, "none")


def test_1x1_example_matches_dot_oracle():
    x = BinaryTensor.from_pm1(np.array([1, 1, -1, 1]).reshape(1, 1, 4))
    assert conv_reference(x, one_by_one([1, -1, -1, -1]))[0, 0, 0] == 0


def test_constant_input_all_plus_kernel():
    c = 70
    x = gen_input("constant", (3, 3, c), seed=0)
    acc = conv_reference(x, one_by_one(np.ones(c)))
    assert np.all(acc == c)


def test_same_padding_corner_uses_four_taps():
    x = gen_input("constant", (4, 4, 2), seed=0)
    ks = BinaryKernelSet.from_pm1(np.ones((3, 3, 2, 1), np.int8))
    acc = conv_reference(x, LayerSpec("binconv", ks, "same"))
    assert acc.shape == (4, 4, 1)
    assert acc[0, 0, 0] == 4 * 2 and acc[1, 1, 0] == 9 * 2 and acc[0, 1, 0] == 6 * 2


def test_no_padding_dims(rng):
    layer = random_layer(rng, 5, 3, r=3, s=2, padding="none")
    assert conv_reference(random_input(rng, 6, 7, 5), layer).shape == (4, 6, 3)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["same", "none"]), st.booleans())
def test_reference_matches_einsum_oracle(seed, padding, fixed):
    rng = np.random.default_rng(seed)
    c, k = int(rng.integers(1, 80)), int(rng.integers(1, 10))
    r, s = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(r, 8)), int(rng.integers(s, 8))
    layer = random_layer(rng, c, k, r, s, padding, "fixconv" if fixed else "binconv")
    x = random_input(rng, h, w, c, (8, 4) if fixed else None)
    ctr = CostCounters()
    acc = conv_reference(x, layer, ctr)
    assert np.array_equal(acc, oracle_conv(tensor_values(x), layer.weights.to_pm1(), padding))
    ho, wo = acc.shape[:2]
    assert ctr.bit_ops == ho * wo * r * s * c * k
    bound = r * s * c * (128 if fixed else 1)
    assert np.abs(acc).max() <= bound


def test_channel_and_kind_mismatch(rng):
    layer = random_layer(rng, 4, 2)
    with pytest.raises(ShapeError):
        conv_reference(random_input(rng, 4, 4, 5), layer)
    with pytest.raises(ShapeError):
        conv_reference(random_input(rng, 4, 4, 4, fixed=(8, 4)), layer)


def test_normalize_binarize_examples():
    ks = BinaryKernelSet.from_pm1(np.ones((1, 1, 1, 3), np.int8))
    layer = LayerSpec("binconv", ks, "none", thresholds=[3, 3, 3], flip=[False, False, True])
    out = normalize_binarize(np.array([[[5, 3, 5]]]), layer)
    assert out.to_pm1().ravel().tolist() == [1, 1, -1]
    with pytest.raises(ShapeError):
        normalize_binarize(np.zeros((1, 1, 2)), layer)


def test_maxpool_examples():
    window = np.array([1, -1, -1, -1]).reshape(2, 2, 1)
    assert maxpool2x2(BinaryTensor.from_pm1(window)).to_pm1().item() == 1
    assert maxpool2x2(BinaryTensor.from_pm1(-np.ones((2, 2, 1)))).to_pm1().item() == -1
    out = maxpool2x2(gen_input("constant", (4, 4, 3), seed=0))
    assert out.dims == (2, 2, 3) and np.all(out.to_pm1() == 1)
    with pytest.raises(ShapeError):
        maxpool2x2(gen_input("constant", (3, 4, 3), seed=0))


@given(st.integers(0, 2**32 - 1))
def test_maxpool_matches_numpy_max(seed):
    rng = np.random.default_rng(seed)
    arr = np.where(rng.random((6, 4, 70)) < 0.5, -1, 1)
    expected = arr.reshape(3, 2, 2, 2, 70).max(axis=(1, 3))
    assert np.array_equal(maxpool2x2(BinaryTensor.from_pm1(arr)).to_pm1(), expected)


def test_binarynet_reference_bit_ops_closed_form():
    m = load_model(shipped_model_path())
    x = gen_input("noise", (32, 32, 128), seed=0)
    res = infer(m, x, "reference")
    expected = sum(h * w * 9 * c * k for h, w, c, k in
                   [(32, 32, 128, 128), (16, 16, 128, 256), (16, 16, 256, 256),
                    (8, 8, 256, 512), (8, 8, 512, 512)])
    assert res.counters.bit_ops == expected
    assert res.accumulators.shape == (8, 8, 512)


def test_constant_input_gives_constant_interior():
    m = gen_synthetic_model((12, 12, 8), [("conv", 3, 3, 8, 8), "pool", ("conv", 3, 3, 8, 4)], seed=1)
    res = infer(m, gen_input("constant", (12, 12, 8), seed=0))
    # conv1 borders reach pooled row/col 0, which conv2 reads at row/col 1
    interior = res.accumulators[2:-2, 2:-2]
    assert interior.size
    assert np.all(interior == interior[0, 0])


def test_infer_backend_errors():
    m = gen_synthetic_model((8, 8, 4), [("conv", 3, 3, 4, 4)], seed=0)
    x = gen_input("noise", (8, 8, 4), seed=0)
    with pytest.raises(PlanError):
        infer(m, x, "weight_reuse")
    with pytest.raises(BnnError):
        infer(m, x, "magic")
    with pytest.raises(ShapeError):
        infer(m, gen_input("noise", (8, 8, 5), seed=0))
    with pytest.raises(ShapeError):
        infer(m, gen_input("noise", (8, 8, 4), seed=0, fixed=(8, 4)))


def test_activation_buffers_swap():
    buf = ActivationBuffers("img")
    assert buf.read() == "img" and buf.write_slot == 1
    buf.write("l1")
    buf.swap()
    assert buf.read() == "l1" and buf.write_slot == 0
    buf.write("l2")
    assert buf.read() == "l1"


def test_infer_keeps_layer_inputs():
    m = gen_synthetic_model((8, 8, 4), [("conv", 3, 3, 4, 4), "pool", ("conv", 1, 1, 4, 2)], seed=0)
    x = gen_input("noise", (8, 8, 4), seed=0)
    res = infer(m, x, keep_activations=True)
    assert [a.dims for a in res.activations] == [(8, 8, 4), (8, 8, 4), (4, 4, 4)]
    assert set(res.layer_counters) == {"conv1", "conv2"}
    assert res.prediction in (0, 1)
    first = conv_reference(x, m.layers[0])
    assert res.activations[1] == normalize_binarize(first, m.layers[0])


def test_fixed_point_model_matches_manual_chain():
    m = gen_synthetic_model((6, 6, 3), [("conv", 3, 3, 3, 4), ("conv", 3, 3, 4, 2)], seed=3,
                            activation="fixed")
    x = gen_input("noise", (6, 6, 3), seed=1, fixed=(8, 4))
    assert isinstance(x, FixedTensor)
    a1 = oracle_conv(x.values, m.layers[0].weights.to_pm1(), "same")
    b1 = (a1 >= m.layers[0].thresholds) ^ m.layers[0].flip
    a2 = oracle_conv(np.where(b1, 1, -1), m.layers[1].weights.to_pm1(), "same")
    assert np.array_equal(infer(m, x).accumulators, a2)
