"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class CutoffTooSmallError(RuntimeError):
    """Fock truncation is too small for the requested state or dynamics."""

    def __init__(self, message, leakage=None):
        super().__init__(message)
        self.leakage = leakage


class InfeasibleTargetError(ValueError):
    """No drive amplitude reaches the requested entangling phase."""

    def __init__(self, message, max_phi=None):
        super().__init__(message)
        self.max_phi = max_phi


class PrecisionError(RuntimeError):
    def __init__(self, message, estimates=None):
        super().__init__(message)
        self.estimates = estimates


class NeedsMoreStatesError(ValueError):
    def __init__(self, message, missing_mass=None):
        super().__init__(message)
        self.missing_mass = missing_mass


class ModelMismatchWarning(UserWarning):
    pass
