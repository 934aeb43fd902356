import numpy as np
import pytest
from hypothesis import settings

from bnnreuse.bittensor import BinaryKernelSet, BinaryTensor, FixedTensor
from bnnreuse.model import LayerSpec

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def oracle_conv(vals, w_pm1, padding):
    """Plain integer convolution via einsum over zero-padded windows.

    vals: (h, w, c) integers (+/-1 or fixed raw), w_pm1: (r, s, c, k).
    """
    vals = np.asarray(vals, dtype=np.int64)
    w_pm1 = np.asarray(w_pm1, dtype=np.int64)
    r, s, _, _ = w_pm1.shape
    if padding == "same":
        pr, ps = (r - 1) // 2, (s - 1) // 2
        vals = np.pad(vals, ((pr, r - 1 - pr), (ps, s - 1 - ps), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(vals, (r, s), axis=(0, 1))  # (ho, wo, c, r, s)
    return np.einsum("hwcrs,rsck->hwk", win, w_pm1)


def tensor_values(x):
    return x.to_pm1() if isinstance(x, BinaryTensor) else x.values


def random_pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8)


def random_layer(rng, c, k, r=3, s=3, padding="same", kind="binconv", name="conv"):
    ks = BinaryKernelSet.from_pm1(random_pm1(rng, (r, s, c, k)))
    thr = rng.integers(-3, 4, size=k)
    flip = rng.random(k) < 0.3
    return LayerSpec(kind, ks, padding, thr, flip, name)


def random_input(rng, h, w, c, fixed=None):
    if fixed is None:
        return BinaryTensor.from_pm1(random_pm1(rng, (h, w, c)))
    tbits, fbits = fixed
    half = 1 << (tbits - 1)
    return FixedTensor.from_raw(rng.integers(-half, half, size=(h, w, c)), tbits, fbits)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
