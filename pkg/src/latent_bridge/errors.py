"""Exception types raised across the package.

Every error derives from :class:`LatentBridgeError` so callers (and the CLI)
can catch the whole family at once.  Numerical aborts derive from
:class:`NumericalError`, which the CLI maps to its own exit code.
"""

from __future__ import annotations


class LatentBridgeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(LatentBridgeError, ValueError):
    pass


class DomainError(LatentBridgeError, ValueError):
    """Input outside the domain of an operation (e.g. log of a non-positive value)."""


class AxisOutOfRange(LatentBridgeError, IndexError):
    pass


class NotScalar(LatentBridgeError, ValueError):
    pass


class DetachedTensor(LatentBridgeError, RuntimeError):
    """The tensor is not recorded on a live tape."""


class NumericalError(LatentBridgeError, ArithmeticError):
    """Base for aborts caused by non-finite values during training."""


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    """Raised when a loss becomes NaN/Inf.

    ``last_good`` holds a parameter snapshot (name -> array) from the last
    finite step and ``trace`` the metric rows recorded so far, when available.
    """

    def __init__(self, message: str, last_good=None, trace=None):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


class NonPositiveSigma(LatentBridgeError, ValueError):
    pass


class LengthMismatch(LatentBridgeError, ValueError):
    pass


class LabelOutOfRange(LatentBridgeError, ValueError):
    pass


class EmptyHoldout(LatentBridgeError, ValueError):
    pass


class QuotaUnreachable(LatentBridgeError, RuntimeError):
    """Rejection sampling could not fill every per-class quota.

    ``acceptance_rates`` maps class index to the fraction of drawn samples
    accepted for that class; ``counts`` maps class index to samples kept.
    """

    def __init__(self, message: str, acceptance_rates=None, counts=None):
        super().__init__(message)
        self.acceptance_rates = acceptance_rates or {}
        self.counts = counts or {}


class EmptyBank(LatentBridgeError, ValueError):
    pass


class BadDomain(LatentBridgeError, ValueError):
    pass


class EmptyDataset(LatentBridgeError, ValueError):
    pass


class MissingMapping(LatentBridgeError, KeyError):
    pass


class ZeroVector(LatentBridgeError, ValueError):
    pass


class BadMagic(LatentBridgeError, ValueError):
    pass


class TruncatedFile(LatentBridgeError, ValueError):
    pass


class CountMismatch(LatentBridgeError, ValueError):
    pass


class UnknownKind(LatentBridgeError, ValueError):
    pass


class BatchTooLarge(LatentBridgeError, ValueError):
    pass


class VersionUnsupported(LatentBridgeError, ValueError):
    pass


class CorruptEntry(LatentBridgeError, ValueError):
    pass


class DegenerateCovariance(UserWarning):
    """Warning: fewer samples than feature dimensions; covariance was regularized."""
