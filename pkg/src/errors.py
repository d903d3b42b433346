"""Exception types of the toolkit. Each class fixes the CLI exit status it maps to."""


class DenoiseError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when this escapes a command."""

    exit_code = 1


class MissingInputError(DenoiseError):
    exit_code = 2


class OutputPathError(DenoiseError):
    exit_code = 2


class DegenerateSignalError(DenoiseError, ValueError):
    """Zero-energy reference, silent input or otherwise undefined quantity."""

    exit_code = 3


class AlignmentError(DenoiseError, ValueError):
    """Lengths, sample rates or grid shapes that must agree do not."""

    exit_code = 4


class ConfigurationError(DenoiseError, ValueError):
    exit_code = 5


class WavFormatError(DenoiseError, ValueError):
    """Malformed header, unsupported channel count or bit depth, overrange write."""

    exit_code = 5


class DivergenceError(DenoiseError, RuntimeError):
    """
    The mask fit produced a non-finite loss or gradient.

    ``mask`` is the last mask with a finite loss and ``trajectory`` the points
    recorded before the failure, so callers can still persist partial results.
    """

    exit_code = 6

    def __init__(self, message: str, mask=None, trajectory=()):
        super().__init__(message)
        self.mask = mask
        self.trajectory = list(trajectory)
