"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CEDError(Exception):
    exit_code = 1


class ConfigError(CEDError, ValueError):
    exit_code = 2


class DataError(CEDError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path = path
        self.line_no = line_no


class UnsupportedSessionError(DataError):
    pass


class EmptyCorpusError(DataError):
    pass


class DegenerateSessionError(DataError):
    pass


class DimensionError(DataError, ValueError):
    pass


class InputTooShortError(DataError, ValueError):
    pass


class NoPairsError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class UndefinedCorrelationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericFailure(CEDError, FloatingPointError):
    exit_code = 4

    def __init__(self, msg, layer=None):
        super().__init__(msg if layer is None else f"{msg} (layer: {layer})")
        self.layer = layer
