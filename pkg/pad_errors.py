"""
pad_errors.py
-------------
Exception hierarchy shared by every stage script.

Validation problems (bad manifest, bad config, single-class metrics input)
are the caller's fault and map to exit code 1 in run_pad.py; everything else
is a runtime failure (exit code 2).
"""
from typing import Optional


class PadError(Exception):
    """Base class for all errors raised by the pipeline."""


class ValidationFailure(PadError):
    """Input that can be fixed by the user."""


class ManifestError(ValidationFailure, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(f"{where}{message}")


class ConfigError(ValidationFailure, ValueError):
    pass


class GeometryError(ValidationFailure, ValueError):
    pass


class MetricsError(ValidationFailure, ValueError):
    pass


class CheckpointError(PadError):
    pass


class TrainingError(PadError):
    pass
