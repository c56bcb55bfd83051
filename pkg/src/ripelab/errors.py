"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: validation problems exit with 2,
everything else raised from a pipeline stage exits with 3.
"""

from __future__ import annotations


class RipelabError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(RipelabError):
    """Input violates a schema, precondition, or invariant."""


class FitError(RipelabError):
    """A numeric fit is degenerate (rank deficient, zero variance, ...)."""


class InsufficientCorrespondences(RipelabError):
    """Fewer than the minimum usable feature matches were found."""

    def __init__(self, count: int, minimum: int = 4):
        self.count = count
        self.minimum = minimum
        super().__init__(
            f"insufficient correspondences: found {count}, need at least {minimum}"
        )


class EstimationError(RipelabError):
    """Robust model estimation failed (no consensus, singular model)."""


class GenerationError(RipelabError):
    """Synthetic dataset generation cannot satisfy the configuration."""


class StageError(RipelabError):
    """A pipeline stage could not run; carries the stage name."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage}: {message}")
