"""Exception hierarchy shared across the package.

Everything raised on bad user input derives from TokaggError so the CLI
can map it to a data-error exit code; genuine bugs surface as ordinary
Python exceptions.
"""


class TokaggError(Exception):
    """Base class for errors caused by invalid input, config, or state."""


class ShapeMismatchError(TokaggError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(TokaggError, ValueError):
    """A configuration value violates a documented constraint."""


class DegenerateInputError(TokaggError, ValueError):
    """Input is structurally valid but degenerate (zero vector, row too short)."""


class StateError(TokaggError, RuntimeError):
    """Operation requires state that has not been established (e.g. untrained codebook)."""


class EvaluationError(TokaggError, RuntimeError):
    """A numerical evaluation produced non-finite results or diverged."""


class DataError(TokaggError, ValueError):
    """Input data files or records are inconsistent or incomplete."""


class FormatError(DataError):
    """A binary or JSON artifact failed to parse.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedAPError(TokaggError, ValueError):
    """Average precision is undefined because the positive set is empty."""
