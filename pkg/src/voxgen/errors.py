"""Error types shared across modules."""


class ValidationError(ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ValueError):
    """Shapes or resolutions do not line up; message names the offending axes."""


class FormatError(ValueError):
    """A binary file failed to parse; message names the byte offset."""


class TrainingError(RuntimeError):
    """A training run left its sanity envelope (non-finite loss, missed floor)."""


class PipelineError(RuntimeError):
    """A generation pipeline stage is missing or untrained."""


class ConfigError(ValueError):
    """A run configuration document is malformed."""
