"""Exception hierarchy shared by the pipeline modules.

The CLI maps these onto its exit-code contract: configuration problems
exit 2, data/file problems exit 3, anything else exits 4.
"""


class AnomsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AnomsegError):
    """Invalid or inconsistent pipeline configuration."""


class DataError(AnomsegError):
    """Invalid input data: manifests, files, geometry, masks."""


class FormatError(DataError):
    """Malformed or truncated binary/JSON artifact file."""
