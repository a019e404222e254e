"""Exception hierarchy shared by every module.

Each error carries a short machine-parsable ``category`` and the process exit
code the CLI maps it to.
"""

from __future__ import annotations


class PdlstmError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(PdlstmError, ValueError):
    category = "config"
    exit_code = 2


class ShapeError(PdlstmError, ValueError):
    category = "shape-mismatch"
    exit_code = 2


class NumericError(PdlstmError, ArithmeticError):
    category = "numeric"
    exit_code = 3


class FormatError(PdlstmError, OSError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    category = "io"
    exit_code = 4

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
