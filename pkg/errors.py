# errors.py


class HdrtvError(Exception):
    """Base class for every error raised by this project."""


class ParameterError(HdrtvError, ValueError):
    pass


class ComputationError(HdrtvError, ArithmeticError):
    pass


class StateError(HdrtvError, RuntimeError):
    pass


class ConfigError(HdrtvError, ValueError):
    pass


class ImageIOError(HdrtvError, OSError):
    def __init__(self, message: str, path=None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.offset = offset


class FormatError(ImageIOError):
    pass


class IngestionError(HdrtvError):
    def __init__(self, message: str, filename: str | None = None):
        super().__init__(f"{filename}: {message}" if filename else message)
        self.filename = filename


class TrainingError(HdrtvError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(f"step {step}: {message}" if step is not None else message)
        self.step = step
