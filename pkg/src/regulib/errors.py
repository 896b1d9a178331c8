"""Exception and warning types raised by regulib."""


class RegulibError(Exception):
    """Base class for all regulib errors."""


class IntegrationError(RegulibError):
    """A vector field returned a non-finite derivative."""

    def __init__(self, t, index, message=None):
        self.t = float(t)
        self.index = int(index)
        super().__init__(
            message or f"non-finite derivative at t={self.t:.6g}, component {self.index}"
        )


class DivergenceError(RegulibError):
    """State norm exceeded the divergence bound during integration."""

    def __init__(self, t, norm, trajectory=None):
        self.t = float(t)
        self.norm = float(norm)
        self.trajectory = trajectory
        super().__init__(f"state norm {self.norm:.3g} exceeded bound at t={self.t:.6g}")


class SynthesisError(RegulibError):
    """Design data violates a structural requirement (Hurwitz, distinct roots, ...)."""


class EvaluationError(RegulibError):
    """A user-supplied model map produced a non-finite value."""


class AssumptionViolation(RegulibError):
    """A numerical spot check of a standing assumption failed."""

    def __init__(self, message, initial_point=None):
        self.initial_point = initial_point
        super().__init__(message)


class AnalysisError(RegulibError):
    """An analysis could not be carried out on the supplied data."""


class ConfigError(RegulibError):
    """Invalid run configuration."""


class AssumptionWarning(UserWarning):
    """Spot check suggests an assumption may not hold; results may be unreliable."""
