"""Exception hierarchy shared by every cnerf module.

Each class carries the process exit code the CLI maps it to:
0 success, 1 invariant/assertion failure, 2 usage/input error.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional, Union


class CnerfError(Exception):
    """Base class for all errors raised by cnerf."""

    exit_code = 1


# ============================================================================
# Usage / input errors (exit 2)
# ============================================================================


class UsageError(CnerfError):
    """Bad flags, unreadable inputs, anything the user must fix."""

    exit_code = 2


class ConfigError(UsageError):
    """Unknown or ill-typed configuration key."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class MissingInputError(UsageError):
    """A required input file does not exist."""

    def __init__(self, path: Union[str, Path], what: str = "input file"):
        super().__init__(f"{what} not found: {path}")
        self.path = Path(path)


class InputFormatError(UsageError):
    """A record in an input file could not be parsed."""

    def __init__(self, path: Union[str, Path], line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = Path(path)
        self.line = line


# ============================================================================
# Invariant errors (exit 1)
# ============================================================================


class InvariantError(CnerfError):
    """An invariant or precondition of the numerical core was violated."""

    exit_code = 1


class DomainError(InvariantError):
    """Input outside an operation's domain (point behind camera, pixel out of bounds)."""

    def __init__(self, message: str, value: Any = None):
        super().__init__(message)
        self.value = value


class DegenerateGeometryError(InvariantError):
    """Two rays are (nearly) parallel; carries |d_q . d_s|."""

    def __init__(self, abs_dot: float):
        super().__init__(f"rays are parallel within tolerance: |d_q . d_s| = {abs_dot!r}")
        self.abs_dot = abs_dot


class PreconditionError(InvariantError):
    """Caller violated an operation's precondition."""


class ContractError(InvariantError):
    """Misuse of the differentiation tape (e.g. non-scalar root)."""


class FieldError(InvariantError):
    """Non-finite radiance-field parameter; carries the parameter path."""

    def __init__(self, path: str):
        super().__init__(f"non-finite field parameter at {path}")
        self.path = path


class OptimizerError(InvariantError):
    """Non-finite gradient handed to the optimizer."""

    def __init__(self, iteration: int, message: str = "non-finite gradient"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class TrainingError(InvariantError):
    """Non-finite loss during training; carries the per-term breakdown."""

    def __init__(self, iteration: int, terms: dict[str, float]):
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {detail}")
        self.iteration = iteration
        self.terms = dict(terms)
