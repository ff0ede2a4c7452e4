"""Exception types shared across the package.

Each maps to a stable one-word code used by the CLI for machine-parsable
failure lines.
"""


class PeterRecError(Exception):
    code = "ERROR"


class ShapeError(PeterRecError, ValueError):
    """Operand shapes are incompatible. Message names both shapes."""

    code = "SHAPE"


class VocabularyError(PeterRecError, ValueError):
    """An item ID falls outside the configured vocabulary."""

    code = "VOCAB"


class ParseError(PeterRecError, ValueError):
    """A data file line could not be parsed. Carries the line number."""

    code = "PARSE"

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(PeterRecError, ValueError):
    code = "CONFIG"


class DataError(PeterRecError, ValueError):
    code = "DATA"


class ContractViolation(PeterRecError, RuntimeError):
    """An internal precondition was broken (e.g. a tunable parameter
    reached the optimizer without a gradient)."""

    code = "CONTRACT"
