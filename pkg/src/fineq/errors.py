"""Exception hierarchy shared by every fineq module.

Each error carries a short machine-readable ``code`` and the process exit
status the CLI maps it to (1 validation, 2 I/O or file format, 3 internal
invariant violation).
"""


class FineQError(Exception):
    code = "internal"
    exit_code = 3


class ValidationError(FineQError, ValueError):
    code = "validation"
    exit_code = 1


class NonFiniteError(ValidationError):
    code = "non-finite"


class FormatError(FineQError):
    code = "format"
    exit_code = 2


class MissingFileError(FormatError, FileNotFoundError):
    code = "missing-file"


class SizeMismatchError(FormatError):
    code = "size-mismatch"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "version-mismatch"


class TruncatedError(FormatError):
    code = "truncated"


class InvariantError(FineQError):
    code = "invariant"
    exit_code = 3
