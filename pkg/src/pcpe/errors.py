"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to; anything not
listed here exits 1.
"""


class PcpeError(Exception):
    exit_code = 1


class ConfigError(PcpeError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2


class DataError(PcpeError):
    """Malformed input data (parse failures, schema violations)."""

    exit_code = 3


class NumericError(PcpeError):
    """Non-finite value produced by a tensor op, or a diverged loss."""

    exit_code = 4


class CacheError(PcpeError):
    """Cache miss in strict mode, fingerprint mismatch, or corrupt cache file."""

    exit_code = 5


class ShapeError(PcpeError):
    """Tensor dimension mismatch."""


class TapeError(PcpeError):
    """Autodiff tape misuse (backward twice, empty tape, non-scalar loss)."""


class InputError(PcpeError):
    """Operation preconditions violated (all-masked input, empty list, bad id)."""
