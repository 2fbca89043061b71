"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed or out of range."""


class DataError(ValueError):
    """Input data (ids, corpora, artifacts) is invalid or missing."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class ParseError(ValueError):
    """A model response does not follow the response grammar.

    ``line`` is 1-based; ``expected`` names the grammar production.
    """

    def __init__(self, message: str, line: int | None = None, expected: str | None = None):
        self.line = line
        self.expected = expected
        where = f"line {line}: " if line is not None else ""
        exp = f" (expected {expected})" if expected else ""
        super().__init__(f"{where}{message}{exp}")


class StructureError(ValueError):
    """A node sequence cannot close a full binary tree.

    ``position`` is the 0-based index where decoding failed.
    """

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        super().__init__(message if position is None else f"{message} (at position {position})")


class TreeValidationError(ValueError):
    """A decoded tree breaks a semantic rule (role/leaf, logical relation, vocabulary)."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
