class PixPointError(Exception):
    pass


class InvalidInputError(PixPointError, ValueError):
    pass


class NumericError(PixPointError, FloatingPointError):
    """Raised when an operator produces a non-finite value."""

    def __init__(self, op: str, msg: str = "non-finite output"):
        super().__init__(f"{op}: {msg}")
        self.op = op


class DegenerateConfigurationError(PixPointError):
    pass


class RegistrationFailure(PixPointError):
    pass
