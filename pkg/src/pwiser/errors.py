"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad key, arch/loss mismatch)."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class SchemaError(ValueError):
    """Input file is missing a required column."""


class LabelParseError(ValueError):
    """A label cell could not be parsed as 0/1, or violates label consistency."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given labels (e.g. AUC with one class)."""


class NumericalError(ArithmeticError):
    """Loss became NaN or infinite during training."""

    def __init__(self, message, component=None, batch_index=None):
        super().__init__(message)
        self.component = component
        self.batch_index = batch_index


class StateError(RuntimeError):
    """Operation called in the wrong state (e.g. optimizer step without gradients)."""
