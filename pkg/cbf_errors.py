#!/usr/bin/env python3
"""
Error types for the resilient CBF simulator.
Every failure a scenario or a run can hit derives from CbfError so callers can
catch one type at the boundary (the CLI maps it to exit code 1).
"""


class CbfError(Exception):
    """Base class for all simulator errors"""


class NonFiniteState(CbfError):
    """A state component became NaN or infinite during integration"""


class EmptyBoundingBox(CbfError):
    """The scenario provides no state bounds to sample from"""


class DegeneratePolytope(CbfError):
    """Input polytope has (numerically) empty interior"""


class UnboundedPolytope(CbfError):
    """Input polytope has a recession direction"""


class GradientSingularity(CbfError):
    """Two positions coincide and a pair atom is not differentiable"""


class RelativeDegreeMismatch(CbfError):
    """An input appears in a cascade level below the declared order"""


class DimensionTooLarge(CbfError):
    """Stacked state is too large for grid sampling"""


class JitterExceedsPeriod(CbfError):
    """Sampling jitter bound is not smaller than the nominal period"""


class InputOutOfBounds(CbfError):
    """Held input lies outside its agent's constant input set"""


class ScenarioError(CbfError):
    """Scenario file is malformed or violates its own invariants"""


class SolverFailure(CbfError):
    """LP/QP returned a status the caller cannot recover from"""

    def __init__(self, message: str, status=None):
        super().__init__(message)
        self.status = status


class TimeOutOfRangeWarning(UserWarning):
    """Nominal trajectory queried outside [t0, tf]; time was clamped"""
