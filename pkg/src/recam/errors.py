"""Exception hierarchy shared by all modules."""


class RecamError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RecamError, ValueError):
    pass


class ParseError(RecamError):
    def __init__(self, path, line_no: int, msg: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


class SchemaError(RecamError):
    pass


class IntegrityError(RecamError):
    pass


class InstanceTooLongError(RecamError):
    pass


class UndefinedSimilarityError(RecamError):
    pass


class ContractError(RecamError):
    pass


class TranslationError(RecamError):
    """A translator call failed; ``attempts`` counts tries made so far."""

    def __init__(self, msg: str, attempts: int = 1, retriable: bool = True):
        self.attempts = attempts
        self.retriable = retriable
        super().__init__(f"{msg} (attempt {attempts})")


class TrainingAborted(RecamError):
    def __init__(self, msg: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{msg}: {self.diagnostics}")


class ResourceExhausted(RecamError):
    pass


class MissingAssetsError(RecamError):
    pass
