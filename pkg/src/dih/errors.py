"""Exception hierarchy shared by every module.

The CLI maps each family to its own exit code, so new errors should
subclass one of these rather than ``DihError`` directly.
"""


class DihError(Exception):
    """Base class for all library errors."""


class DimensionError(DihError, ValueError):
    """Operand shapes do not line up."""


class ContractError(DihError, ValueError):
    """A precondition on arguments or object state was violated."""


class TapeStateError(DihError, RuntimeError):
    """A tape was used in a state that does not allow the request."""


class NumericalError(DihError, ArithmeticError):
    """An operation produced NaN or Inf."""


class IntegrityError(DihError, RuntimeError):
    """A frozen artifact changed when it must not have."""


class ArtifactError(DihError, OSError):
    """Base for problems reading a file produced by this package."""


class ArtifactNotFoundError(ArtifactError, FileNotFoundError):
    pass


class MalformedHeaderError(ArtifactError):
    pass


class ChecksumMismatchError(ArtifactError):
    pass
