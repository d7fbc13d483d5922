"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class InputError(ValueError):
    """Array shapes or values do not match what an operation expects."""


class StateError(RuntimeError):
    """An operation was called before its preconditions were established."""


class NumericError(FloatingPointError):
    """A loss or intermediate value became non-finite."""


class LabelAccessError(RuntimeError):
    """Evaluation-only labels were read outside an evaluation context."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing fields or has an incompatible version."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for the CLI."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
