"""Custom exceptions for the dynamic reconstruction application."""

from typing import List, Optional, Sequence


class NdrError(Exception):
    """Base exception for reconstruction operations."""

    pass


class ConfigurationError(NdrError):
    """Configuration errors."""

    pass


class ValidationError(NdrError):
    """Input validation errors."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index

    def __str__(self) -> str:
        base_msg = super().__str__()
        if self.index is not None:
            base_msg += f" (index: {self.index})"
        return base_msg


class GradientError(NdrError):
    """Contract violations of the differentiable engine."""

    def __init__(self, message: str, parameter: Optional[str] = None):
        super().__init__(message)
        self.parameter = parameter

    def __str__(self) -> str:
        base_msg = super().__str__()
        if self.parameter:
            base_msg += f" (parameter: {self.parameter})"
        return base_msg


class NonFiniteLossError(NdrError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, iteration: Optional[int] = None):
        message = f"Non-finite value in loss term '{term}'"
        if iteration is not None:
            message += f" at iteration {iteration}"
        super().__init__(message)
        self.term = term
        self.iteration = iteration


class InitializationError(NdrError):
    """Network initialization failed its probe."""

    pass


class DatasetError(NdrError):
    """Dataset loading and parsing errors."""

    def __init__(self, message: str, problems: Optional[Sequence[str]] = None):
        super().__init__(message)
        self.problems: List[str] = list(problems or [])

    def __str__(self) -> str:
        base_msg = super().__str__()
        if self.problems:
            base_msg += ": " + "; ".join(self.problems)
        return base_msg


class CheckpointError(NdrError):
    """Checkpoint reading and writing errors."""

    pass


class MeshError(NdrError):
    """Mesh extraction and IO errors."""

    pass


class MetricError(NdrError):
    """Evaluation metric errors."""

    pass
