"""Exception hierarchy shared by all modules."""


class CarlError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "carl-error"


class InvalidInputError(CarlError, ValueError):
    code = "invalid-input"


class NumericalDivergenceError(CarlError, ArithmeticError):
    code = "numerical-divergence"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ProtocolError(CarlError, RuntimeError):
    code = "protocol"


class IncompatibleCheckpointError(CarlError, ValueError):
    code = "incompatible-checkpoint"


class LibraryStateError(CarlError, RuntimeError):
    code = "library-state"


class DatasetError(CarlError, ValueError):
    code = "dataset-construction"


class ConfigError(CarlError, ValueError):
    code = "config"


class EmptyMatrixError(CarlError, ValueError):
    code = "empty-matrix"
