"""Exception hierarchy for mbfcn-cli.

Library modules raise these; only the CLI turns them into exit codes.
"""

from typing import Optional


class MbfcnError(Exception):
    """Base error. ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(MbfcnError):
    """Invalid configuration or inconsistent tensor shapes."""


class InputError(MbfcnError):
    """Invalid user-supplied input (files, boxes, flags)."""


class ParseError(InputError):
    """Malformed text file."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class CheckpointError(InputError):
    """Unreadable, truncated or wrongly versioned checkpoint."""


class NumericError(MbfcnError):
    """Non-finite value where a finite one is required."""

    exit_code = 2


class StateError(MbfcnError):
    """Operation called in the wrong state (e.g. backward before forward)."""

    exit_code = 2
