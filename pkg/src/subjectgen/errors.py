"""Domain error types shared across the package.

Precondition violations on plain arguments raise ValueError directly;
the classes here mark failures of a running computation or an external
dependency, so the CLI can map them to nonzero exits with a typed message.
"""


class SubjectGenError(Exception):
    """Base class for all domain errors raised by this package."""


class TrainingDiverged(SubjectGenError):
    """Loss became non-finite during an optimization loop."""


class InversionDiverged(SubjectGenError):
    """A latent or objective became non-finite during inversion."""


class ArchitectureMismatch(SubjectGenError):
    """Two models that must share an architecture do not."""


class CaptionTransportError(SubjectGenError):
    """The captioning endpoint could not be reached. Retriable."""


class CaptionValidationError(SubjectGenError):
    """The captioning response violated the schema after all retries.

    Carries the raw response text for debugging.
    """

    def __init__(self, message: str, raw_response: str | None = None):
        super().__init__(message)
        self.raw_response = raw_response


class ProviderError(SubjectGenError):
    """A context provider failed to produce an image."""


class RunDirectoryExists(SubjectGenError):
    """Refusing to overwrite an existing, non-empty run directory."""
