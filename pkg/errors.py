"""
Exception types raised across the pipeline.
"""

from typing import Optional


class SaluError(Exception):
    """Base class for every pipeline error."""


class ConfigError(SaluError, ValueError):
    """A configuration value violates its schema or invariants."""


class ShapeError(SaluError, ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{kind}: incompatible shapes {rendered}")


class NonFiniteError(SaluError, ArithmeticError):
    """A forward op or gradient produced NaN or Inf."""


class DataFormatError(SaluError, ValueError):
    """A dataset or preference file line could not be parsed."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(
            f"{path}:{line_no}: {reason} (last good line: {line_no - 1})"
        )


class SequenceError(SaluError, ValueError):
    """A token sequence is empty, overlong, unterminated, or out of vocabulary."""


class DivergenceError(SaluError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class PolicyCollapseError(DivergenceError):
    """PPO mean KL exceeded the collapse guard."""


class UsageError(SaluError):
    """Command-line usage is invalid."""


class InsufficientDataError(SaluError, ValueError):
    """A stage received too few episodes or pairs, or episodes of the wrong kind."""
