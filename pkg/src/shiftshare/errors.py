"""Estimation error types shared across estimators."""

from __future__ import annotations

__all__ = [
    "EstimationError",
    "CollinearityError",
    "UnderIdentifiedError",
    "DegenerateClusterError",
    "PredictionError",
]


class EstimationError(RuntimeError):
    """Base class for everything that can go wrong while estimating."""


class CollinearityError(EstimationError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"regressor {column!r} is collinear after demeaning")


class UnderIdentifiedError(EstimationError):
    """Instrument set spans fewer dimensions than the endogenous block."""


class DegenerateClusterError(EstimationError):
    """A clustering dimension has fewer than two clusters."""


class PredictionError(EstimationError):
    """Probability prediction hit an unresolvable fixed-effect level."""
