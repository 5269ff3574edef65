"""Orthogonal state recurrence kernels, baselines, and training harness."""

from .errors import (
    ConfigError,
    DegenerateStateError,
    LatticeError,
    NumericalConsistencyError,
    ShapeError,
    TrainingFault,
)
from .recurrence import (
    EPS,
    Mode,
    StateMatrix,
    StepTrace,
    TokenTriple,
    compression_loss,
    init_state,
    lattice_scan,
    lattice_step,
    osr_gradient,
)

__version__ = "0.1.0"
