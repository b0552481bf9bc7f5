"""Exception hierarchy. Every error carries a short machine-parsable category
used by the CLI for exit reporting."""


class GFlowRecError(Exception):
    category = "internal"


class ConfigurationError(GFlowRecError):
    category = "config"


class DatasetFormatError(GFlowRecError):
    """Malformed dataset file. `line` is the 1-based offending line number."""

    category = "parse"

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DecodeError(GFlowRecError):
    category = "decode"


class TrieLookupError(GFlowRecError):
    category = "lookup"


class UnknownIdError(GFlowRecError):
    category = "lookup"


class StateError(GFlowRecError):
    category = "state"


class TrainingError(GFlowRecError):
    category = "training"


class CheckpointError(GFlowRecError):
    category = "checkpoint"


class RewardError(GFlowRecError):
    category = "reward"


class MissingArtifactError(GFlowRecError):
    """A pipeline stage was invoked before its prerequisite artifact exists."""

    category = "missing-prerequisite"
