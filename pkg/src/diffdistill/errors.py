"""Exception types shared across the toolkit.

The CLI maps these to distinct exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4. Plain ValueError from contract
violations is considered a programming bug and is not remapped.
"""


class DiffDistillError(Exception):
    """Base class for toolkit errors."""


class ConfigError(DiffDistillError):
    """Invalid configuration: bad key, bad value, conflicting options."""


class DataError(DiffDistillError):
    """Malformed or inconsistent on-disk data, or an empty/unusable input."""


class NumericError(DiffDistillError):
    """Non-finite values or numerically invalid state encountered at runtime."""
