"""Exception hierarchy shared by every pmda module."""


class PMDAError(Exception):
    """Base class for all pmda errors."""


class InvalidShapeError(PMDAError, ValueError):
    pass


class InvalidStatisticsError(PMDAError, ValueError):
    pass


class InvalidLabelError(PMDAError, ValueError):
    pass


class InvalidBatchError(PMDAError, ValueError):
    pass


class InvalidDatasetError(PMDAError, ValueError):
    pass


class InvalidDescriptorError(PMDAError, ValueError):
    pass


class InvalidKError(PMDAError, ValueError):
    pass


class UndefinedMetricError(PMDAError, ValueError):
    pass


class NonFiniteError(PMDAError, FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class ContractError(PMDAError, RuntimeError):
    pass


class ParseError(PMDAError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(PMDAError, ValueError):
    pass


class FormatError(PMDAError, ValueError):
    pass


class IntegrityError(PMDAError, ValueError):
    pass


class UnsupportedVersionError(PMDAError, ValueError):
    pass


class ManifestError(PMDAError, ValueError):
    """Manifest validation failure; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"manifest key '{key}': {message}")
        self.key = key


class MissingArtifactError(PMDAError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing input artifact: {path}")
        self.path = str(path)
