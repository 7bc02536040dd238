"""Network structures built from binary branches, and their lowering to packed form."""

from .config import DECOMPOSITIONS, ArchConfig, BlockConfig, bpac_rates
from .lowering import PackedLayer, PackedModel, lower_to_inference, run_layer
from .model import (
    Block,
    ConvUnit,
    DegeneracyReport,
    LayerSum,
    ModelGraph,
    branch_aggregate,
    build_model,
    fusion_gate_mix,
    gate_degeneracy_check,
)

__all__ = [
    "ArchConfig",
    "Block",
    "BlockConfig",
    "ConvUnit",
    "DECOMPOSITIONS",
    "DegeneracyReport",
    "LayerSum",
    "ModelGraph",
    "PackedLayer",
    "PackedModel",
    "bpac_rates",
    "branch_aggregate",
    "build_model",
    "fusion_gate_mix",
    "gate_degeneracy_check",
    "lower_to_inference",
    "run_layer",
]
