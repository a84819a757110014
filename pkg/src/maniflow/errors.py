"""Exception taxonomy shared across the package."""


class FlowError(Exception):
    """Base class for all maniflow errors."""


class ContractError(FlowError):
    """An argument violates a documented precondition (shape, domain, mode)."""


class NonFiniteError(FlowError):
    """A computation produced NaN or infinity, usually from exploded parameters."""


class DegeneracyError(FlowError):
    """A Gram matrix lost positive definiteness; the transform is degenerate."""


class OffManifoldError(FlowError):
    """A point handed to a prescribed-manifold density lies off that manifold."""


class SolverError(FlowError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class IntegrationError(FlowError):
    """An ODE integration failed to complete."""


class TrainingAbortError(FlowError):
    """Training hit a non-finite loss; carries a diagnostic parameter snapshot."""

    def __init__(self, message, epoch=None, phase=None, snapshot=None):
        super().__init__(message)
        self.epoch = epoch
        self.phase = phase
        self.snapshot = snapshot


class ConfigError(FlowError):
    """An experiment configuration is malformed or inconsistent."""


class CheckpointError(FlowError):
    """A checkpoint file is corrupted, truncated, or of an unknown version."""
