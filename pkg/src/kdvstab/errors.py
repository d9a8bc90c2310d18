"""Exception hierarchy shared by all modules."""


class KdvStabError(Exception):
    """Base class; ``kind`` is the short machine-readable error label."""

    kind = "error"


class ConfigurationError(KdvStabError, ValueError):
    kind = "configuration"


class ContractError(KdvStabError, ValueError):
    kind = "contract"


class NumericalError(KdvStabError, ArithmeticError):
    kind = "numerical"


class NearCriticalLengthError(NumericalError):
    """Raised when a Gramian is too ill-conditioned to invert."""

    kind = "near-critical-length"

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class GuardError(KdvStabError, RuntimeError):
    """A smallness or stage guard refused to run; ``measured`` holds the evidence."""

    kind = "guard"

    def __init__(self, message, measured=None):
        super().__init__(message)
        self.measured = dict(measured or {})
