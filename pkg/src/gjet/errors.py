"""Exception hierarchy shared by all gjet modules.

Every error raised by the library derives from GjetError so callers can
catch library failures without masking programming errors.
"""


class GjetError(Exception):
    """Base class for all gjet errors."""


class DomainViolation(GjetError):
    """Evaluation point left the admissible set (pair outside U, z outside
    its interval, or an iterate escaped during a solve)."""


class RangeViolation(GjetError):
    """Requested value u lies outside the attainable range J(x, y)."""


class NoRoot(GjetError):
    """A bracketing interval for a scalar root could not be established."""


class NoConvergence(GjetError):
    """Iteration budget exhausted before reaching the requested tolerance.

    The solver attaches its best iterate so callers can report it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularE(GjetError):
    """|det E| fell below the singularity threshold (local G2 failure)."""


class OutOfImage(GjetError):
    """Requested slope q has no preimage in the admissible x-slice."""


class UnsupportedGeometry(GjetError):
    """The requested geometric test is not implemented for this shape."""


class MassImbalance(GjetError):
    """Source and target masses differ beyond the stated tolerance."""


class AnchorInadmissible(GjetError):
    """Normalization height violates the gradient-bound admissibility rule."""


class InfeasibleBracket(GjetError):
    """No focal parameter bracket exists for some target (unreachable cell)."""

    def __init__(self, message, piece_index=None):
        super().__init__(message)
        self.piece_index = piece_index


class ConfigError(GjetError):
    """Malformed configuration or input file."""
