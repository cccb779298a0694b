"""
Exception hierarchy for degenkernel.

Library code raises these; the CLI maps them to process exit codes.
"""

from typing import Iterable, Optional


class DegenKernelError(Exception):
    """Base class for all library errors."""


class DomainError(DegenKernelError, ValueError):
    """Argument outside the domain of an operation (poles, excluded indices, bad ranges)."""


class ConditionError(DomainError):
    """One of the structural conditions on (a, b) failed numerical validation."""

    def __init__(self, condition: int, detail: str):
        self.condition = condition
        self.detail = detail
        super().__init__(f"Condition {condition} violated: {detail}")


class ExprSyntaxError(DomainError):
    """
    Syntax error in a coefficient expression.

    Attributes:
        offset: Byte offset into the source where parsing failed
        expected: Sorted tuple of token descriptions acceptable at that offset
    """

    def __init__(self, message: str, offset: int, expected: Iterable[str] = ()):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        text = f"{message} at offset {offset}"
        if self.expected:
            text += f" (expected one of: {', '.join(self.expected)})"
        super().__init__(text)


class ExprDomainError(DomainError):
    """Evaluation left the domain of a sub-expression, e.g. log of a negative."""

    def __init__(self, node: str, detail: str):
        self.node = node
        super().__init__(f"domain error in '{node}': {detail}")


class ConvergenceError(DegenKernelError, RuntimeError):
    """A series, quadrature, root-finder or extrapolation failed to converge."""

    def __init__(self, message: str, estimate: Optional[float] = None):
        self.estimate = estimate
        super().__init__(message)


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DOMAIN = 2
EXIT_CONVERGENCE = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, (ConvergenceError, RuntimeError)):
        return EXIT_CONVERGENCE
    return EXIT_DOMAIN
