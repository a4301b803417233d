"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1, data
problems exit 2, numeric divergence exits 3.
"""


class EscError(Exception):
    """Base class for all errors raised by this package."""


class DataError(EscError):
    """Malformed or unusable input data (files, metadata, containers)."""


class AudioDecodeError(DataError):
    """WAV container could not be decoded.

    ``chunk_id`` names the RIFF chunk (or magic) that triggered the failure.
    """

    def __init__(self, message: str, chunk_id: str | None = None):
        if chunk_id is not None:
            message = f"{message} (chunk {chunk_id!r})"
        super().__init__(message)
        self.chunk_id = chunk_id


class EmptyDatasetError(DataError):
    """An operation that needs at least one record got none."""


class NoSignalError(DataError):
    """Clip contains no samples above the silence threshold."""


class TooShortError(DataError):
    """Clip is shorter than the minimum length the operation requires."""


class FilterDesignError(DataError):
    """Filter or filterbank parameters cannot produce a valid design."""


class MetadataError(DataError):
    """Dataset metadata (CSV rows, taxonomy files) is invalid."""


class UnknownCategoryError(MetadataError):
    """Category label is not covered by the active taxonomy."""


class ContainerError(DataError):
    """Serialized tensor/model container is unreadable."""


class ContainerVersionError(ContainerError):
    """Container version is not supported by this build."""


class ChecksumError(ContainerError):
    """Container checksum does not match its payload."""


class DivergenceError(EscError):
    """Training loss became non-finite."""
