"""Project exception hierarchy.

Invalid numbers and shapes raise plain ``ValueError``; the classes here cover
problems found outside pydantic validation and solver failures that carry a
trace for the run report.
"""


class QcDistortError(Exception):
    """Base class for qcdistort errors."""


class InputError(QcDistortError, ValueError):
    """Missing, malformed or hash-mismatched input files."""


class NonConvergenceError(QcDistortError, RuntimeError):
    """An iterative computation stopped before meeting its tolerance."""

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = list(trace or [])
