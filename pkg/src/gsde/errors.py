"""Exception hierarchy shared by all modules."""


class GSDEError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(GSDEError):
    """Bad user input: malformed configuration, invalid band or grid, etc."""


class ExprSyntaxError(ValidationError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExprSyntaxError):
    pass


class ArityError(ExprSyntaxError):
    pass


class NonDifferentiableError(ValidationError):
    """A symbolic derivative was requested through ``abs``."""


class NumericalError(GSDEError):
    """A computation produced a non-finite value."""


class EvaluationError(NumericalError):
    def __init__(self, message, t=None, x=None, y=None):
        super().__init__(f"{message} (t={t!r}, x={x!r}, y={y!r})")
        self.t, self.x, self.y = t, x, y


class FlowError(NumericalError):
    def __init__(self, t, x_pos, y_val):
        super().__init__(
            f"non-finite diffusion value along flow at t={t!r}, x={x_pos!r}, y={y_val!r}"
        )
        self.t, self.x_pos, self.y_val = t, x_pos, y_val


class AuditError(ValidationError):
    """Declared coefficient metadata (bound M, Lipschitz K) is violated on the audit box."""
