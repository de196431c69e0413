"""Shared exception taxonomy.

Library functions raise ``ValueError`` for plain argument misuse and one of
the classes below for structured failures the CLI maps to exit code 1.
"""

from __future__ import annotations

__all__ = [
    "QlrtError",
    "CorruptDataError",
    "ContainerError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "ChecksumMismatchError",
    "JudgmentFormatError",
    "DegenerateSampleError",
    "TrainingDivergedError",
]


class QlrtError(Exception):
    """Base class for structured toolkit errors."""


class CorruptDataError(QlrtError):
    """In-memory quantized data violates its own invariants (e.g. a code
    outside the codebook range)."""


class ContainerError(QlrtError):
    """Base class for container read/write failures."""


class BadMagicError(ContainerError):
    """File does not start with the container magic."""


class UnsupportedVersionError(ContainerError):
    """Container version field is not one this reader understands."""


class TruncatedFileError(ContainerError):
    """File ended before a declared section was complete, or carries
    unexpected trailing bytes."""


class ChecksumMismatchError(ContainerError):
    """Stored CRC32 does not match the recomputed one."""


class JudgmentFormatError(QlrtError):
    """A judgment file line failed to parse; message carries the 1-based
    line number."""


class DegenerateSampleError(QlrtError):
    """Statistical input with zero variance where a spread is required."""


class TrainingDivergedError(QlrtError):
    """Training produced a non-finite loss; reported, never swallowed."""
