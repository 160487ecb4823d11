"""Exception taxonomy shared across the pipeline.

Exit-code mapping for the CLI lives in cli.py; everything here is a plain
exception so library callers can catch precisely.
"""


class StepstoneError(Exception):
    """Base class for all package errors."""


class ContractError(StepstoneError):
    """A documented precondition or invariant was violated by the caller."""


class CategoryError(ContractError):
    """Unknown scene category."""


class VocabularyError(ContractError):
    """Caption contains tokens outside the closed vocabulary."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        super().__init__(f"out-of-vocabulary tokens: {self.tokens}")


class ConfigError(StepstoneError):
    """Bad configuration value, unknown key, or unsupported option."""


class DependencyError(StepstoneError):
    """A pipeline stage was invoked before its prerequisites exist."""


class StalenessError(StepstoneError):
    """Existing artifacts were produced under a different config hash."""


class IntegrityError(StepstoneError):
    """Checkpoint or manifest failed a digest / structural check."""


class TrainingDivergence(StepstoneError):
    """Loss went non-finite or a post-training quality gate failed."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class CheckpointError(StepstoneError):
    """A required checkpoint is missing or unusable."""


class NumericError(StepstoneError):
    """A numeric routine hit a degenerate input (e.g. singular covariance)."""


class BackgroundFreeWarning(UserWarning):
    """Raised (as a warning) when an object fills the frame and no
    background rays exist for the background loss."""
