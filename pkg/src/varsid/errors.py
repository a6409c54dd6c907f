"""Error types shared across the package.

Each failure mode the file formats and numerical kernels can hit gets its
own class so callers (and the CLI) can react to specific codes.
"""


class VarsidError(Exception):
    """Base class for all package errors."""


class BadMagic(VarsidError):
    """File does not start with the expected magic bytes."""


class TruncatedFile(VarsidError):
    """File ended before the declared payload was read."""


class VersionMismatch(VarsidError):
    """File carries an unsupported format version."""


class CorruptCheckpoint(VarsidError):
    """Checkpoint payload could not be decoded."""


class ZeroEmbedding(VarsidError):
    """An embedding row has zero norm and cannot be normalized."""

    def __init__(self, row: int):
        super().__init__(f"embedding row {row} has zero norm")
        self.row = row


class NoInteractions(VarsidError):
    """No non-cold item has positive popularity."""


class InvalidTemperature(VarsidError):
    """Gumbel-Softmax temperature must be positive."""


class InvalidPrior(VarsidError):
    """Stopping probability outside (0, 1)."""


class NumericalOverflow(VarsidError):
    """A forward pass produced a non-finite intermediate."""

    def __init__(self, step: int, where: str = "encoder"):
        super().__init__(f"non-finite value in {where} at step {step}")
        self.step = step


class EnumerationTooLarge(VarsidError):
    """V**T exceeds the enumeration oracle's budget."""


class EmptySlice(VarsidError):
    """Evaluation slice contains no items with positive weight."""


class DegenerateRanks(VarsidError):
    """All code lengths are equal; rank correlation is undefined."""
