"""Shared exception types."""


class LatticeError(Exception):
    pass


class ShapeError(LatticeError):
    """Operands have incompatible or invalid dimensions."""


class DegenerateStateError(LatticeError):
    """A memory slot has (near-)zero norm and cannot be normalized."""


class NumericalConsistencyError(LatticeError):
    """An internal numerical identity was violated beyond tolerance."""


class ConfigError(LatticeError):
    """Invalid run configuration."""


class TrainingFault(LatticeError):
    """Non-finite gradient or parameter update."""
