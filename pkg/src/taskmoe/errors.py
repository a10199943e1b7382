"""Exception types raised across the package."""


class TaskMoeError(Exception):
    """Base class for all package errors."""


class DimensionError(TaskMoeError, ValueError):
    pass


class DegenerateInputError(TaskMoeError, ValueError):
    pass


class NumericalError(TaskMoeError, ArithmeticError):
    pass


class LabelError(TaskMoeError, ValueError):
    pass


class ParameterError(TaskMoeError, ValueError):
    pass


class ShardError(TaskMoeError, ValueError):
    pass


class ConsistencyError(TaskMoeError, ValueError):
    pass


class SpecError(TaskMoeError, KeyError):
    pass


class ConfigError(TaskMoeError, ValueError):
    """Invalid configuration; ``field`` names the offending dotted key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DivergenceError(TaskMoeError, FloatingPointError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


class FormatError(TaskMoeError, ValueError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"malformed checkpoint at byte {offset}: {message}")


class VersionError(TaskMoeError, ValueError):
    pass
