"""Exception hierarchy shared by every voltvar module."""

from __future__ import annotations


class VoltVarError(Exception):
    """Base class for all package errors."""


# -- input / feeder model ---------------------------------------------------

class ParseError(VoltVarError):
    """Malformed feeder, scenario or plan file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ValidationError(VoltVarError):
    """An invariant of the feeder or scenario set is violated.

    ``ref`` names the offending bus, line, PV unit or scenario id.
    """

    def __init__(self, message: str, ref: str | None = None):
        super().__init__(message)
        self.ref = ref


class ScenarioError(ValidationError):
    """Scenario-level validation failure (unknown id, probability sum)."""


class UnitError(VoltVarError):
    """Inconsistent or degenerate per-unit bases."""


# -- power flow -------------------------------------------------------------

class NonConvergence(VoltVarError):
    def __init__(self, iterations: int, mismatch: float, message: str = ""):
        super().__init__(message or f"power flow did not converge after {iterations} "
                                    f"iterations (mismatch {mismatch:.3e} pu)")
        self.iterations = iterations
        self.mismatch = mismatch


class SingularNetwork(VoltVarError):
    pass


class DegeneratePoint(VoltVarError):
    pass


# -- Q-V curve --------------------------------------------------------------

class DomainError(VoltVarError, ValueError):
    pass


class InvalidCurve(VoltVarError, ValueError):
    pass


# -- optimization -----------------------------------------------------------

class NumericalFailure(VoltVarError):
    pass


class NoIncumbent(VoltVarError):
    pass


class ModelAssemblyError(VoltVarError):
    def __init__(self, family: str, message: str):
        super().__init__(f"[{family}] {message}")
        self.family = family


class InfeasiblePlacement(VoltVarError):
    """No placement satisfies the voltage bounds.

    ``worst`` is ``(scenario_id, bus, phase, vmag, bound)`` for the most
    violated node-phase of the base case.
    """

    def __init__(self, message: str, worst=None):
        super().__init__(message)
        self.worst = worst


# -- control simulation -----------------------------------------------------

class OscillationDetected(VoltVarError):
    """``envelope`` maps each oscillating inverter to its ``(min Q, max Q)`` in pu."""

    def __init__(self, inverters, envelope, message: str = ""):
        inverters = list(inverters)
        width = max((hi - lo for lo, hi in envelope.values()), default=0.0)
        super().__init__(message or f"Volt-VAr oscillation at {', '.join(inverters)} "
                                    f"(Q swing {width:.4g} pu)")
        self.inverters = inverters
        self.envelope = envelope


class Divergence(VoltVarError):
    pass
