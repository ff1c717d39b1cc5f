"""
Error types for the LAPRAN-CS toolkit
Each error carries the process exit code the CLI reports for it
"""


class LapranError(Exception):
    """Base class for toolkit errors"""

    exit_code = 1


class ConfigError(LapranError, ValueError):
    """Invalid configuration or argument (exit code 2)"""

    exit_code = 2


class DataError(LapranError):
    """Missing, unreadable or malformed data (exit code 3)"""

    exit_code = 3


class NumericError(LapranError, ArithmeticError):
    """Non-finite values during training or evaluation (exit code 4)"""

    exit_code = 4


class MeasurementFormatError(DataError):
    """Malformed MRCS measurement file"""

    def __init__(self, message: str, offset: int, path: str = None):
        """
        Args:
            message: What went wrong
            offset: Byte offset in the file where parsing failed
            path: File being read, if known
        """
        location = f"{path}@{offset}" if path else f"byte {offset}"
        super().__init__(f"{message} ({location})")
        self.offset = offset
        self.path = path
