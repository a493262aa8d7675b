class RainError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(RainError, ValueError):
    pass


class ProtocolError(RainError):
    """Evaluation or split protocol violated (e.g. identity missing from gallery)."""


class ConfigError(RainError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.message = message
        self.field = field
        self.line = line

    def __str__(self):
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.field is not None:
            where.append(f"field '{self.field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        return prefix + super().__str__()


class CheckpointError(RainError):
    pass


class TrainingAborted(RainError):
    """A non-finite loss was produced; ``step`` records where."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
