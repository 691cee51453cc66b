"""Continuous diffusion over attributed 3D graphs with trajectory-aware OOD scoring."""

from trajood.errors import NumericalError, ValidationError
from trajood.graph import (
    LIGAND,
    POCKET,
    ComplexGraph,
    JointState,
    PrototypeTable,
    assemble_state,
    com_project,
    encode_types,
)
from trajood.schedule import Schedule

__version__ = "0.1.0"

__all__ = [
    "LIGAND",
    "POCKET",
    "ComplexGraph",
    "JointState",
    "NumericalError",
    "PrototypeTable",
    "Schedule",
    "ValidationError",
    "assemble_state",
    "com_project",
    "encode_types",
]
