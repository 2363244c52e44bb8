"""Exception types shared across the package."""


class TwinError(Exception):
    """Base class for all desktwin errors."""


class ModelFormatError(TwinError):
    """A model/parameter/config file is malformed or violates invariants."""


class ContractError(TwinError):
    """An operation was called with arguments violating its preconditions."""


class SessionFormatError(TwinError):
    """A session log file is malformed. Carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SimulationDiverged(TwinError):
    """State became non-finite during integration."""

    def __init__(self, message: str, joint: int | None = None, substep: int | None = None):
        super().__init__(message)
        self.joint = joint
        self.substep = substep
