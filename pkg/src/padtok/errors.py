class PadtokError(Exception):
    pass


class ConfigError(PadtokError):
    """Config text could not be parsed."""


class ValidationError(PadtokError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(PadtokError, ValueError):
    pass


class RangeError(PadtokError, ValueError):
    """An index or length falls outside its allowed range."""


class NumericError(PadtokError, FloatingPointError):
    pass


class IntegrityError(PadtokError):
    """A checkpoint or token file is truncated or corrupt."""


class ComponentMismatch(PadtokError):
    pass


class DataError(PadtokError, ValueError):
    pass


class LookupFailure(PadtokError, KeyError):
    pass
