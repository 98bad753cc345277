"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class PpkedError(Exception):
    exit_code = 4


class ShapeError(PpkedError, ValueError):
    """Dimension mismatch between operands."""


class ContractError(PpkedError, RuntimeError):
    """A precondition of an operation was violated."""


class ConfigError(PpkedError):
    exit_code = 2


class DataError(PpkedError):
    exit_code = 3


class LeakageError(DataError):
    """A held-out record would be visible to retrieval."""


class FeatureFileError(DataError):
    code = "feature-file"


class FeatureShapeError(FeatureFileError, ShapeError):
    code = "feature-shape"
    exit_code = 3


class FeatureVersionError(FeatureFileError):
    code = "feature-version"


class FeatureTruncatedError(FeatureFileError):
    code = "feature-truncated"


class CheckpointMismatch(ConfigError):
    """Checkpoint hyperparameters disagree with the active configuration."""

    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: checkpoint={a!r} config={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("checkpoint hyperparameters differ from config:\n" + "\n".join(lines))
