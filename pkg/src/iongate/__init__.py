"""Simulation and pulse synthesis for multi-mode trapped-ion entangling gates."""
from .drive import DriveProgram, GateTarget, Tone, Variant, solve_rabi, synthesize
from .dynamics import ErrorShift, HamiltonianLevel, NoiseSpec
from .errors import (
    CutoffTooSmallError, InfeasibleTargetError, InvalidArgumentError, ModelMismatchWarning,
    NeedsMoreStatesError, PrecisionError,
)
from .fockspace import FockSpace, SystemSpec
from .metrics import GateReport, fock_fidelity, gate_fidelity, thermal_gate_fidelity

__version__ = "0.1.0"

__all__ = [
    "CutoffTooSmallError", "DriveProgram", "ErrorShift", "FockSpace", "GateReport", "GateTarget",
    "HamiltonianLevel", "InfeasibleTargetError", "InvalidArgumentError", "ModelMismatchWarning",
    "NeedsMoreStatesError", "NoiseSpec", "PrecisionError", "SystemSpec", "Tone", "Variant",
    "fock_fidelity", "gate_fidelity", "solve_rabi", "synthesize", "thermal_gate_fidelity",
]
