"""Exception hierarchy shared across the package."""

from __future__ import annotations


class WinforgeError(Exception):
    """Base for all errors raised by this package."""


class DimensionError(WinforgeError):
    """Shape mismatch between a block and its input/parameters."""

    def __init__(self, message: str, block: int | None = None):
        if block is not None:
            message = f"block {block}: {message}"
        super().__init__(message)
        self.block = block


class NonFiniteError(WinforgeError):
    """NaN or Inf encountered where a finite value is required."""

    def __init__(self, message: str, block: int | None = None, step: int | None = None):
        parts = []
        if block is not None:
            parts.append(f"block {block}")
        if step is not None:
            parts.append(f"step {step}")
        if parts:
            message = f"{', '.join(parts)}: {message}"
        super().__init__(message)
        self.block = block
        self.step = step


class ConfigError(WinforgeError):
    """Invalid or inconsistent configuration."""


class BlockPatternError(WinforgeError):
    """Network block sequence does not match the expected pattern."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"position {position}: {message}"
        super().__init__(message)
        self.position = position


class DegenerateProbesError(WinforgeError):
    """Every probe pair collapsed to identical points."""


class ConvergenceError(WinforgeError):
    """Iterative estimator failed to converge."""

    def __init__(self, message: str, residual: float | None = None):
        if residual is not None:
            message = f"{message} (residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual


class PersistError(WinforgeError):
    """Base for serialization/deserialization failures."""


class FormatVersionError(PersistError):
    """File declares an unsupported format version."""


class MalformedFileError(PersistError):
    """File cannot be parsed or its arrays do not match declared shapes."""


class DimensionChainError(PersistError):
    """Stored blocks do not form a valid dimension chain."""


class ManifestError(PersistError):
    """Run manifest verification failed."""
