"""Error types raised by the condensa engine."""


class CondensaError(Exception):
    """Base class for every engine error."""


class DimensionError(CondensaError):
    """Tensor shapes do not conform."""

    def __init__(self, message, *shapes):
        self.shapes = [tuple(shape) for shape in shapes]
        if self.shapes:
            message = f"{message} (shapes: {', '.join(str(s) for s in self.shapes)})"
        super().__init__(message)


class DomainError(CondensaError):
    """A value lies outside the domain an operation accepts."""


class ContractError(CondensaError):
    """A pre-condition or calling protocol was violated."""


class OptimizationError(CondensaError):
    """An optimization produced a non-finite objective."""

    def __init__(self, message, step):
        self.step = step
        super().__init__(f"{message} at step {step}")


class FormatError(CondensaError):
    """An FMEX container could not be parsed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class ConfigError(CondensaError):
    """An experiment or grid document failed validation."""

    def __init__(self, errors):
        # errors: dotted key -> list of messages
        self.errors = errors
        keys = ', '.join(sorted(errors)) or '<document>'
        super().__init__(f"Invalid configuration: {keys}")

    @property
    def keys(self):
        return sorted(self.errors)


class ReportError(CondensaError):
    """A CSV report or plot input is unusable."""
