"""
Exception hierarchy for the capture toolkit.

Every error carries the process exit code the CLI should use when it escapes a
subcommand, so main.py can map failures in one place.
"""

from typing import Any, Dict, List, Optional


class ImhoiError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InvalidInput(ImhoiError, ValueError):
    """Input violates a documented precondition."""


class DegenerateInput(InvalidInput):
    """Geometry is degenerate (parallel columns, collinear points, zero-area faces)."""


class EmptySet(InvalidInput):
    """A point set that must be non-empty is empty."""


class TooShort(InvalidInput):
    """A sequence is shorter than the operation needs."""


class ShapeMismatch(InvalidInput):
    """Arrays that must agree in shape do not."""


class StepOutOfRange(InvalidInput):
    """Diffusion step outside 1..N."""


class PreconditionViolation(InvalidInput):
    """Operation called in a state it does not accept."""


class MissingAngularVelocity(InvalidInput):
    """IMU stream lacks the angular velocity channel."""


class BehindCamera(InvalidInput):
    """No face of the posed mesh lies in front of the camera."""


class DegenerateMotion(ImhoiError):
    """Rotation excitation is insufficient to determine the calibration."""

    exit_code = 3


class ConfigValidationError(ImhoiError):
    """Custom exception for configuration validation errors."""

    exit_code = 2

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        super().__init__(message)
        self.errors = errors or []


class MissingArtifact(ImhoiError):
    """An upstream stage output is missing."""

    exit_code = 4

    def __init__(self, path: Any, hint: str = ''):
        message = f'Missing upstream artifact: {path}'
        if hint:
            message += f' ({hint})'
        super().__init__(message)
        self.path = str(path)


class UntrainedDenoiser(ImhoiError):
    """Refinement requested with a denoiser that was never trained."""

    exit_code = 4


class NumericalFailure(ImhoiError):
    """Base for failures that should leave a diagnostics file behind."""

    exit_code = 5

    def __init__(self, message: str, trace: Optional[List[float]] = None):
        super().__init__(message)
        self.trace = list(trace or [])

    def diagnostics(self) -> Dict[str, Any]:
        return {'error': type(self).__name__, 'message': str(self), 'trace': self.trace}


class NonFiniteEnergy(NumericalFailure):
    """Tracking energy became NaN or infinite."""


class NonFiniteLoss(NumericalFailure):
    """Training loss became NaN or infinite."""
