"""Exception hierarchy shared by every subsystem."""


class FuseError(Exception):
    """Base class for all errors raised by fmrifuse."""


class ConfigError(FuseError, ValueError):
    """Invalid configuration value or incompatible settings."""


class ShapeError(FuseError, ValueError):
    """Tensor or token shapes do not conform."""


class ContractError(FuseError, ValueError):
    """A caller violated an operation precondition."""


class NonFiniteError(FuseError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(FuseError, ValueError):
    """A binary or JSON file does not match its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NotDicomError(FormatError):
    """Missing preamble or DICM magic."""


class UnsupportedTransferSyntaxError(FormatError):
    """Transfer syntax other than Explicit VR Little Endian."""

    def __init__(self, uid):
        super().__init__(f"unsupported transfer syntax {uid!r}")
        self.uid = uid


class DicomParseError(FormatError):
    """Structural error inside a DICOM stream."""


class EncodingError(FuseError, ValueError):
    """A metadata value cannot be encoded under the schema."""
