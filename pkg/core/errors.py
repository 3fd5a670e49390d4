# polarseg/core/errors.py
from typing import Any, Dict, Optional

class PolarSegError(Exception):
    """Base exception for toolkit errors. exit_code is what the CLI returns."""
    def __init__(self, message: str, exit_code: int = 1, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}

class InputValidationError(PolarSegError):
    """Exception for invalid configuration values or operation arguments."""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=2, details=details)

class ShapeMismatchError(InputValidationError):
    """Raised when tensors or planes disagree in shape. details carries the offending dims."""
    pass

class OpticsError(PolarSegError):
    """Exception for physically undefined optics inputs (e.g. total internal reflection)."""
    pass

class DatasetLoadError(PolarSegError):
    """Exception for missing or malformed dataset files."""
    def __init__(self, message: str, path: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        details = dict(details or {})
        if path is not None:
            details["path"] = str(path)
        super().__init__(message, exit_code=3, details=details)
        self.path = path

class FormatError(PolarSegError):
    """Exception for malformed PDER or EAFC binary files."""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=4, details=details)

class CheckpointError(FormatError):
    """Exception for checkpoints that do not match the requested configuration."""
    pass

class TrainingDivergedError(PolarSegError):
    """Raised when the training loss stops being finite."""
    def __init__(self, step: int, lr: float, loss_tail: list):
        super().__init__(
            f"Non-finite loss at step {step} (lr={lr:.3e})",
            exit_code=5,
            details={"step": step, "lr": lr, "loss_tail": list(loss_tail)},
        )

class AttentionUnavailableError(PolarSegError):
    """Exception for attention requests on models without fusion."""
    pass

class VerificationFailedError(PolarSegError):
    """Raised by the verification suite when at least one check fails."""
    def __init__(self, failed: list):
        super().__init__(f"{len(failed)} verification check(s) failed", exit_code=6, details={"failed": failed})

class NumericalError(PolarSegError):
    """Raised under anomaly detection when an operation produces NaN or Inf."""
    pass
