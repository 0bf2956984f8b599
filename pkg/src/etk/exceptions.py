"""Exception types raised across the toolkit."""

from __future__ import annotations


class ToleranceNotReached(RuntimeError):
    """An inner solve stopped before reaching the requested accuracy.

    The achieved residuals are kept on the exception so callers can log them
    or decide to retry with a larger iteration budget.
    """

    def __init__(self, message: str, **achieved: float) -> None:
        super().__init__(message)
        self.achieved = dict(achieved)


class DivergenceError(RuntimeError):
    """The curvature line search could not find a finite local estimate."""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}
