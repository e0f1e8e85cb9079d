"""Exception hierarchy shared by every module."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """A configuration document or dataset cannot be used as given."""


class DataFormatError(ValueError):
    """A dataset file is malformed.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedMetricError(ValueError):
    """A metric has no value for the given input (e.g. single-class labels)."""


class TrainingDivergenceError(RuntimeError):
    """Loss or parameters became non-finite during training."""

    def __init__(self, message: str, batch_index: int | None = None, epoch: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch
