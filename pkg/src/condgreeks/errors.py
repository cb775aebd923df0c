"""Exception hierarchy. CLI exit codes hang off these classes."""

from __future__ import annotations


class CondGreeksError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CondGreeksError, ValueError):
    """Invalid grid, model or run configuration."""

    exit_code = 2


class ContractError(CondGreeksError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class DegenerateKernelError(CondGreeksError, ValueError):
    """Euler kernel with non-positive standard deviation."""

    exit_code = 3


class SingularTangentError(CondGreeksError, ArithmeticError):
    """First-variation process collapsed to (numerically) zero."""

    exit_code = 3


class DegenerateConstraintError(CondGreeksError, ValueError):
    """Constraint functional has an identically zero Malliavin derivative."""

    exit_code = 3


class IllConditionedError(CondGreeksError, ArithmeticError):
    """Denominator of a ratio estimate is not distinguishable from zero.

    ``diagnostics`` carries the offending statistics so callers can report
    them instead of emitting NaN.
    """

    exit_code = 3

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class KernelStarvationError(IllConditionedError):
    """Every kernel weight underflowed; the smoothing estimator has no data."""


class DecompositionError(CondGreeksError, ArithmeticError):
    """Hahn-Jordan decomposition or its sampler failed a mass check."""

    exit_code = 3


class PropertyFailure(CondGreeksError, AssertionError):
    """A deterministic property check did not hold."""

    exit_code = 4
