"""Exception hierarchy shared by all hegraph modules."""


class HegraphError(Exception):
    """Base class for every error raised by this package."""


class DimMismatchError(HegraphError):
    """Operand shapes are inconsistent."""


class ZeroRowError(HegraphError):
    """A row that must be normalizable has (near-)zero norm."""


class NonFiniteError(HegraphError):
    """A value that must be finite is NaN or Inf."""


class ZeroQueryError(HegraphError):
    """A classifier query vector has (near-)zero norm."""


class EmptyClassError(HegraphError):
    """A class has no samples or no prompt embeddings."""


class NonUnitRowError(HegraphError):
    """Graph node features must have unit-norm rows."""


class InvariantError(HegraphError):
    """A built graph violates one of its structural invariants."""


class TapeMismatchError(HegraphError):
    """Backward called with gradients that do not match the forward tape."""


class StepOutOfRangeError(HegraphError):
    """Learning-rate schedule queried past the final training step."""


class ConfigError(HegraphError):
    """Invalid training configuration or variant switch combination."""


class SpecError(HegraphError):
    """Invalid synthetic task specification."""


# --- file-format errors -------------------------------------------------

class IoError(HegraphError):
    """Generic read/write failure."""


class BadMagicError(IoError):
    """File does not start with the expected magic bytes."""


class BadVersionError(IoError):
    """Embedding container version is unsupported."""


class TruncatedFileError(IoError):
    """File length disagrees with the header (short or trailing bytes)."""


class UnsupportedDtypeError(IoError):
    """Embedding container carries a dtype code this reader does not know."""


class ManifestError(IoError):
    """Task manifest is invalid; the message names the offending field."""


class VersionMismatchError(IoError):
    """Checkpoint file magic/version is not recognized."""


class CorruptChecksumError(IoError):
    """Checkpoint payload does not match its stored checksum."""
