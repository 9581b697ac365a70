"""Encoder-decoder graph attention with local pre-training for empty-container repositioning."""
from .autodiff import ContractError, DimensionError, NumericError, ParameterSet, Tensor
from .topology import Topology, TopologyError, bundled_topology, load_topology

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "ParameterSet",
    "Tensor",
    "Topology",
    "TopologyError",
    "bundled_topology",
    "load_topology",
    "__version__",
]
