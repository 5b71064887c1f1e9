class LfvitError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LfvitError, ValueError):
    pass


class ConfigError(LfvitError, ValueError):
    pass


class ManifestError(LfvitError, ValueError):
    """Weight file manifest is inconsistent with its blob or config."""


class ImageFormatError(LfvitError, ValueError):
    pass
