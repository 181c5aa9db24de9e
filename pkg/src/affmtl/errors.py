"""Exception hierarchy shared across the package.

Configuration and input-file problems (anything the user can fix by editing a
config or a data file) derive from ``UsageError``; the CLI maps those to exit
code 1 and everything else to 2.
"""


class AffmtlError(Exception):
    """Base class for all package errors."""


class UsageError(AffmtlError):
    """User-correctable problem: bad config, bad flag, malformed input file."""


class ConfigError(UsageError):
    """Invalid or inconsistent configuration (unknown key, bad value, ...)."""


class ParseError(UsageError):
    """Malformed annotation or report file; message carries the line number."""


class LabelValidationError(UsageError):
    """A parsed value violates its declared range or sentinel convention."""


class DuplicateConflictError(UsageError):
    """Two records share (video_id, frame_index) but disagree on labels."""


class DimensionError(AffmtlError):
    """Tensor shapes incompatible with the requested operation."""


class DomainError(AffmtlError):
    """Math domain violation, e.g. log of a non-positive value."""


class DegenerateInputError(AffmtlError):
    """Input too small or empty for the operation to be well defined."""


class EmptyBatchError(AffmtlError):
    """Every sample in a batch was masked out for the requested task."""


class ContractError(AffmtlError):
    """An internal calling convention was violated (e.g. non-scalar loss)."""


class MissingFrameError(AffmtlError):
    """A required (video_id, frame_index) key has no stored vector."""


class IntegrityError(AffmtlError):
    """Stored artifact fails its self-consistency check."""


class TrainingError(AffmtlError):
    """Training aborted (e.g. non-finite gradient); message names the tensor."""
