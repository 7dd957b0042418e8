"""Robust nonlinear trajectory optimization with system level synthesis."""
from .blockops import BlockDiagonal, CausalOperator, DimensionError
from .dynamics import UncertainModel, linear_model, satellite_model
from .ocp import NlpProblem, OcpSpec, SlsSolution, assemble
from .remainder import MuBound, estimate_mu
from .sets import BoxImageSet, ParamBox, Polytope, set_membership_update, vertices
from .sls_core import PerformanceSpec, SlsResponse, recover_gains, tubes

__all__ = [
    "BlockDiagonal", "BoxImageSet", "CausalOperator", "DimensionError", "MuBound", "NlpProblem", "OcpSpec",
    "ParamBox", "PerformanceSpec", "Polytope", "SlsResponse", "SlsSolution", "UncertainModel", "assemble",
    "estimate_mu", "linear_model", "recover_gains", "satellite_model", "set_membership_update", "tubes", "vertices",
]
