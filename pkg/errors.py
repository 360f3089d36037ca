"""
Exception hierarchy shared by every brushgym module.
"""
from typing import Any, Dict, Optional


class BrushGymError(Exception):
    """Base error. `exit_code` is what the CLI returns when this escapes a command."""
    def __init__(self, message: str, exit_code: int = 1, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


class InvalidActionError(BrushGymError):
    pass


class ShapeMismatchError(BrushGymError):
    pass


class DegenerateEpisodeError(BrushGymError):
    """Initial loss is ~0: the reference is already matched, the sample is skipped."""
    pass


class SvgParseError(BrushGymError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})", details={"offset": offset})


class DemoConversionError(BrushGymError):
    pass


class ProjectionError(BrushGymError):
    pass


class NoKneeError(BrushGymError):
    pass


class CalibrationError(BrushGymError):
    pass


class TopologyMismatchError(BrushGymError):
    pass


class CheckpointError(BrushGymError):
    pass


class ConfigError(BrushGymError):
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=2, details=details)


class CorpusError(BrushGymError):
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, exit_code=2, details=details)


class OutputLockedError(BrushGymError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=2)
