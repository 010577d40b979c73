"""Exception hierarchy shared across the pipeline."""


class OrgTrlError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(OrgTrlError):
    """A file does not follow the expected on-disk layout."""


class CorruptionError(OrgTrlError):
    """A file is truncated or its payload disagrees with its header."""


class ValidationError(OrgTrlError, ValueError):
    """Data is well-formed but violates a value invariant (e.g. non-finite)."""


class ShapeError(OrgTrlError, ValueError):
    pass


class ConfigError(OrgTrlError, ValueError):
    pass


class LoadError(OrgTrlError):
    pass
