class GacnnError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(GacnnError, ValueError):
    pass


class DimensionError(GacnnError, ValueError):
    pass


class ContractError(GacnnError, ValueError):
    pass


class ConfigurationError(GacnnError, ValueError):
    pass


class DataError(GacnnError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(GacnnError):
    pass


class CorruptionError(FormatError):
    pass


class TrainingError(GacnnError, RuntimeError):
    pass
