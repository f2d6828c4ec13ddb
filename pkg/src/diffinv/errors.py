"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its documented exit status without inspecting messages.
"""


class DiffinvError(Exception):
    exit_code = 1


class ConfigError(DiffinvError, ValueError):
    exit_code = 2


class ShapeError(DiffinvError, ValueError):
    exit_code = 2


class DomainError(DiffinvError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""

    exit_code = 2


class SymmetryError(DiffinvError, ValueError):
    exit_code = 2


class NotPSDError(DiffinvError, ValueError):
    exit_code = 2


class StateError(DiffinvError, RuntimeError):
    exit_code = 1


class InadmissibleError(DiffinvError, ValueError):
    """Non-physical parameter or deformation (e.g. negative conductivity)."""

    exit_code = 3


class SolverError(DiffinvError, RuntimeError):
    exit_code = 3


class ZeroScoreError(DiffinvError, ValueError):
    exit_code = 3


class DivergenceError(DiffinvError, RuntimeError):
    """Numerical blow-up; ``context`` holds diagnostics such as step index."""

    exit_code = 3

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def __str__(self):
        base = super().__str__()
        if not self.context:
            return base
        extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} ({extra})"


class DataIOError(DiffinvError, OSError):
    exit_code = 4
