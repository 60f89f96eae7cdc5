"""Exception types shared across the package."""


class FabricNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FabricNetError):
    """Tensor shapes are incompatible for the requested operation."""


class ValidationError(FabricNetError):
    """A configuration value or argument is out of its allowed range."""


class SpecParseError(FabricNetError):
    """An ensemble spec string is malformed.

    Carries the character position at which parsing failed.
    """

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ManifestError(FabricNetError):
    """Base class for dataset manifest problems."""


class ManifestNotFoundError(ManifestError):
    """The manifest file does not exist."""


class ManifestFormatError(ManifestError):
    """A manifest row is malformed; carries the 1-based line number."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ManifestEncodingError(ManifestError):
    """The manifest file is not valid UTF-8."""


class ImageDecodeError(FabricNetError):
    """An image file could not be decoded; message names the path."""


class CheckpointError(FabricNetError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointCrcError(CheckpointError):
    """The checkpoint trailing CRC32 does not match its contents."""


class CheckpointTruncatedError(CheckpointError):
    """The file is too short to contain a complete checkpoint."""
