class ConfigError(ValueError):
    """Invalid configuration; ``fields`` names every offending entry."""

    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = list(fields or [])


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatVersionError(DatasetFormatError):
    pass


class UsageError(ValueError):
    pass
