"""Learned Volt/Var control with certified closed-loop stability."""

from .errors import InputError, NumericalError, VoltVarError
from .gridmodel import FeederModel, SensitivityModel, build_sensitivity, read_feeder
from .surrogate import CVPSC, RPSC, ScalarShapeFunction, SurrogateSet, certify

__all__ = [
    "CVPSC",
    "RPSC",
    "FeederModel",
    "InputError",
    "NumericalError",
    "ScalarShapeFunction",
    "SensitivityModel",
    "SurrogateSet",
    "VoltVarError",
    "build_sensitivity",
    "certify",
    "read_feeder",
]

__version__ = "0.1.0"
