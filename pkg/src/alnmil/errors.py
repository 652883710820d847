"""Exception hierarchy. The CLI prints the class name as the machine-readable error tag."""


class AlnMilError(Exception):
    """Base class for every error raised by this package."""


class ImageDecodeError(AlnMilError):
    pass


class UnsupportedFormatError(AlnMilError):
    pass


class ClinicalParseError(AlnMilError):
    pass


class ConfigurationError(AlnMilError):
    pass


class DimensionError(AlnMilError):
    pass


class DivergenceError(AlnMilError):
    pass


class MissingCacheError(AlnMilError):
    pass


class MissingInputError(AlnMilError):
    pass


class ConfigHashMismatch(AlnMilError):
    pass
