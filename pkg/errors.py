#!/usr/bin/env python3
"""
Error types
Exception hierarchy shared by the library modules and the CLI exit codes
"""

from typing import Optional

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_FAILURE = 3
EXIT_INTERRUPTED = 130


class JotReconError(Exception):
    """Base class for every error raised by this project"""

    exit_code = EXIT_CONFIG_ERROR


class ValidationError(JotReconError, ValueError):
    """Invalid input values (non-finite images, bad thresholds, ...)"""

    def __init__(self, message: str, required: Optional[int] = None):
        super().__init__(message)
        self.required = required


class DimensionError(ValidationError):
    """Array shapes that do not fit together"""


class FormatError(JotReconError):
    """Malformed or unsupported file contents"""


class MalformedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class RankError(FormatError):
    pass


class PatchShapeError(FormatError):
    """Patch dimension that is not a perfect square"""


class ConfigError(JotReconError):
    """Unparseable or inconsistent experiment configuration"""


class NumericalError(JotReconError, ArithmeticError):
    """Non-finite objective, exhausted backtracking or diverging network"""

    exit_code = EXIT_NUMERIC_FAILURE

    def __init__(self, message: str, report=None, layer: Optional[int] = None,
                 patch_index: Optional[int] = None):
        super().__init__(message)
        self.report = report
        self.layer = layer
        self.patch_index = patch_index


class TrainingDiverged(NumericalError):
    """Training loss became non-finite"""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code"""
    if isinstance(error, KeyboardInterrupt):
        return EXIT_INTERRUPTED
    if isinstance(error, JotReconError):
        return error.exit_code
    return 1
