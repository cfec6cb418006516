"""Multivariate disease mapping with M-models and divide-and-conquer fitting."""

from .errors import (
    ConfigError,
    ConvergenceError,
    GraphError,
    MdmapError,
    NumericalError,
    PipelineError,
)
from .graph import (
    AreaGraph,
    PartitionPlan,
    StructureMatrix,
    build_graph,
    expand_partition,
    structure_matrix,
    subgraph,
)
from .inference import CountPanel, FitConfig, SubmodelFit, fit_submodel
from .mmodel import BetweenDiseaseCov, HyperState, bartlett_cov, bartlett_invert

__version__ = "0.1.0"

__all__ = [
    "AreaGraph",
    "BetweenDiseaseCov",
    "ConfigError",
    "ConvergenceError",
    "CountPanel",
    "FitConfig",
    "GraphError",
    "HyperState",
    "MdmapError",
    "NumericalError",
    "PartitionPlan",
    "PipelineError",
    "StructureMatrix",
    "SubmodelFit",
    "bartlett_cov",
    "bartlett_invert",
    "build_graph",
    "expand_partition",
    "fit_submodel",
    "structure_matrix",
    "subgraph",
]
