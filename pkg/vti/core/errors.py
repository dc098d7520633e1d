"""
VTI Error Hierarchy
Every failure the CLI can map to an exit code derives from VtiError
"""


class VtiError(Exception):
    """Base class for all package errors"""


class ContractViolation(VtiError, ValueError):
    """A precondition or shape contract was not met"""


class DomainError(ContractViolation):
    """Input outside the mathematical domain of an op (e.g. log of a non-positive value)"""


class ParseError(VtiError):
    """
    Malformed input file

    Carries the 1-based line number (text formats) or byte offset (binary formats)
    when known.
    """

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        self.line = line
        self.offset = offset
        where = ""
        if line is not None:
            where = f" (line {line})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(f"{message}{where}")


class FormatError(ParseError):
    """Wrong magic, version or checksum in a binary file"""


class DatasetIOError(VtiError, OSError):
    """A file the caller referenced is missing or unwritable"""

    def __init__(self, message: str, path=None):
        self.path = path
        super().__init__(f"{message}: {path}" if path is not None else message)


class TrainingError(VtiError):
    """
    Training aborted

    param_name: parameter whose gradient was non-finite, if any
    checkpoint: last good checkpoint retained when the run diverged
    """

    def __init__(self, message: str, param_name: str | None = None, checkpoint=None):
        self.param_name = param_name
        self.checkpoint = checkpoint
        super().__init__(message)
