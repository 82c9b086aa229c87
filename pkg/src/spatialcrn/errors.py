"""Exception hierarchy shared by all simulators.

Every exception carries a short machine-readable ``code`` and the process
exit status the command line maps it to.
"""

from __future__ import annotations


class SpatialCRNError(Exception):
    code = "error"
    exit_status = 1

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics

    def __str__(self) -> str:
        base = super().__str__()
        if not self.diagnostics:
            return base
        extra = ", ".join(f"{k}={v!r}" for k, v in self.diagnostics.items())
        return f"{base} ({extra})"


class ValidationError(SpatialCRNError, ValueError):
    """Invalid configuration or input data."""

    code = "validation"
    exit_status = 2


class NumericError(SpatialCRNError, ArithmeticError):
    """A numerical procedure failed (non-finite rate, no convergence, ...)."""

    code = "numeric"
    exit_status = 3


class LogicError(SpatialCRNError, RuntimeError):
    """Internal misuse, e.g. sampling from a zero-rate reaction."""

    code = "logic"
    exit_status = 3


class ExplosionError(SpatialCRNError, RuntimeError):
    """Particle cap exceeded; the offending state is attached."""

    code = "explosion"
    exit_status = 4


class JumpGuardError(SpatialCRNError, RuntimeError):
    """Too many PDMP jumps per unit time."""

    code = "jump_guard"
    exit_status = 4
