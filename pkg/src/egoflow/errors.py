class EgoflowError(Exception):
    """Base class for all errors raised by egoflow."""


class ShapeError(EgoflowError, ValueError):
    pass


class InsufficientDataError(EgoflowError):
    pass


class DegenerateGeometryError(EgoflowError):
    def __init__(self, message, condition=None, null_direction=None):
        super().__init__(message)
        self.condition = condition
        self.null_direction = null_direction


class ConfigError(EgoflowError, ValueError):
    pass


class ValidityError(EgoflowError, ValueError):
    pass


class DatasetError(EgoflowError):
    pass


class ParseError(EgoflowError, ValueError):
    def __init__(self, message, path=None, line=None):
        if line is not None:
            message = f"{path}:{line}: {message}" if path else f"line {line}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class OrderError(EgoflowError, ValueError):
    pass
