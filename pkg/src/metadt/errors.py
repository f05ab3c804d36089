"""Exception types shared across the package.

The CLI maps each family onto an exit code, so new errors should derive from
one of :class:`ConfigError`, :class:`DataError` or :class:`NumericError`
where that makes sense.
"""


class MetaDTError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MetaDTError):
    """Invalid configuration value or inconsistent run setup."""


class DigestMismatchError(ConfigError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"checkpoint digest {found} does not match config digest {expected}")
        self.expected = expected
        self.found = found


class DataError(MetaDTError):
    """Bad input data: hierarchy files, feature files, sample ids."""


class ShapeError(MetaDTError, ValueError):
    pass


class DegenerateInputError(MetaDTError, ValueError):
    """A vector has (near) zero norm where a direction is required."""


class ContractError(MetaDTError, ValueError):
    """A documented precondition was violated by the caller."""


class TapeError(MetaDTError):
    pass


class NumericError(MetaDTError, ArithmeticError):
    """A computation produced NaN or Inf."""


class DivergenceError(NumericError):
    def __init__(self, message: str, *, step: int | None = None, episode: int | None = None):
        super().__init__(message)
        self.step = step
        self.episode = episode


class HierarchyError(DataError):
    pass


class CycleError(HierarchyError):
    pass


class MultipleRootsError(HierarchyError):
    pass


class DisconnectedNodeError(HierarchyError):
    pass


class DuplicateClassError(HierarchyError):
    pass


class SemanticDimensionError(HierarchyError):
    pass


class DegenerateGraphError(HierarchyError):
    pass


class UnknownClassError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class CapacityError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, *, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
