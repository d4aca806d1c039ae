"""Exception hierarchy shared across the package."""


class DiffAbmError(Exception):
    """Base class for all package errors."""


class UsageError(DiffAbmError):
    """API misuse: wrong argument combination, stale handles, bad state."""


class DomainError(DiffAbmError):
    """Numeric input outside its mathematical domain."""


class GradientError(DiffAbmError):
    """Backward pass hit a non-finite value; message names the node."""


class ConvergenceError(DiffAbmError):
    """Iterative solver exhausted its budget."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InfeasibleError(DiffAbmError):
    """Problem instance admits no solution (e.g. incompatible zero pattern)."""


class SchemaError(DiffAbmError):
    """File or config does not match its declared schema."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or []


class TemplateError(DiffAbmError):
    """Prompt template references a placeholder with no binding."""


class ParseError(DiffAbmError):
    """Provider response does not follow the yes/no answer format."""


class TransportError(DiffAbmError):
    """Remote provider unreachable after all retries."""


class ProtocolError(DiffAbmError):
    """Remote provider answered with a non-success status."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class EstimationError(DiffAbmError):
    """Archetype probability estimation failed for one or more entries."""

    def __init__(self, message, missing=(), partial=None):
        super().__init__(message)
        self.missing = list(missing)
        self.partial = partial
