class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed bag or checkpoint file.

    ``offset`` is the byte position where decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass
