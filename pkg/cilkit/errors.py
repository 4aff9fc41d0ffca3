"""
Exception hierarchy for the class-incremental adapter toolkit

Library code raises these; only the CLI (manage.py) turns them into
messages and process exit codes.
"""


class CILError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class ConfigError(CILError):
    """Invalid experiment or runtime configuration"""

    exit_code = 1

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class ProtocolError(ConfigError):
    """Class split that the B-m Inc-n protocol cannot realise"""


class DataError(CILError):
    """Malformed dataset, labels or stream"""

    exit_code = 2


class CheckpointError(DataError):
    """Checkpoint manifest/blob that cannot be read back"""


class NumericalError(CILError):
    """Non-finite values or missing gradients during computation"""

    exit_code = 3


class ShapeError(CILError, ValueError):
    """Operand shapes that do not conform"""

    exit_code = 2

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
