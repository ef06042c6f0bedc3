class OryxError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(OryxError, ValueError):
    pass


class ShapeError(OryxError, ValueError):
    pass


class IntegrityError(OryxError, ValueError):
    """Raised when a packed batch or tensor file is internally inconsistent."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class NumericalFailure(OryxError, ArithmeticError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
