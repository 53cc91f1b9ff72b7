"""Exception hierarchy shared by all modules.

Input problems (bad files, inconsistent shapes, invalid topology) derive from
:class:`InputError`; numerical failures (non-convergence, infeasibility) derive
from :class:`NumericalError`.  The CLI maps the two families to exit codes 2
and 1 respectively.
"""

from __future__ import annotations


class VoltVarError(Exception):
    """Base class for all package errors."""


class InputError(VoltVarError, ValueError):
    """Malformed or inconsistent input."""


class TopologyError(InputError):
    """Line set is not a spanning tree rooted at the substation."""


class SingularLineError(InputError):
    """A line has zero series impedance."""


class DimensionError(InputError):
    """Vector or matrix has the wrong shape."""


class DomainError(InputError):
    """Argument lies outside the function's domain."""


class ModelInvalidError(InputError):
    """A sensitivity block that must be positive definite is not."""

    def __init__(self, message: str, min_eigenvalue: float | None = None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class NumericalError(VoltVarError, ArithmeticError):
    """Base class for numerical failures."""


class NumericalRankError(NumericalError):
    """Reduced admittance matrix is singular to working precision."""


class DivergenceError(NumericalError):
    """Iterative method failed to converge.

    ``last_mismatch`` carries the final residual and ``step`` the iteration
    (or closed-loop step) at which the failure surfaced, when known.
    """

    def __init__(self, message: str, last_mismatch: float | None = None, step: int | None = None):
        super().__init__(message)
        self.last_mismatch = last_mismatch
        self.step = step


class InfeasibleError(NumericalError):
    """Problem has no solution (voltage collapse, empty ORPF feasible set)."""

    def __init__(self, message: str, scenario_id: int | None = None):
        super().__init__(message)
        self.scenario_id = scenario_id


class NonsmoothPointError(NumericalError):
    """Jacobian requested at a point where the output clamp is active."""


class NonContractionError(NumericalError):
    """Fixed-point iteration stagnated above tolerance."""
