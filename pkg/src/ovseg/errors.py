"""Exception types shared across the package; the CLI maps them to exit codes."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class AlignmentError(ValueError):
    """Tile origin not aligned with the patch grid."""


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not match the model being loaded."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic payload."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UndefinedMetricError(ValueError):
    """Metric has no defined value (e.g. every class absent)."""
