"""Computation-reuse inference toolkit for binarized neural networks."""

from .bittensor import BinaryKernelSet, BinaryTensor, FixedTensor, binarize, fixed_dot, xnor_popcount_dot
from .counters import CostCounters
from .engine import infer
from .model import InputSpec, LayerSpec, ModelSpec, gen_input, gen_synthetic_model, load_model, save_model
from .reorder import ReorderPlan, make_reorder_plan

__all__ = [
    "BinaryKernelSet", "BinaryTensor", "CostCounters", "FixedTensor", "InputSpec", "LayerSpec",
    "ModelSpec", "ReorderPlan", "binarize", "fixed_dot", "gen_input", "gen_synthetic_model",
    "infer", "load_model", "make_reorder_plan", "save_model", "xnor_popcount_dot",
]

__version__ = "0.1.0"
