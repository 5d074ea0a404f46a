"""Exception hierarchy shared by every simulator layer."""

from __future__ import annotations

from typing import Any


class SimError(Exception):
    """Base class for all simulator errors."""


# frame table / type word codec
class RefcountOverflow(SimError):
    pass


class RefcountUnderflow(SimError):
    pass


class InvalidCombination(SimError):
    pass


class MalformedWord(SimError):
    pass


class TypeMismatch(SimError):
    pass


# type guard
class TransitionError(SimError):
    """A type transition or page-table (de)validation was refused.

    ``outcome`` carries the rejected :class:`~ptsim.type_guard.TransitionOutcome`
    so callers that count rejections get the same record an accepted call
    would have produced.
    """

    reason = "rejected"

    def __init__(self, message: str, outcome: Any = None) -> None:
        super().__init__(message)
        self.outcome = outcome


class EdgeNotAllowed(TransitionError):
    reason = "edge_not_allowed"


class RefCountNonZero(TransitionError):
    reason = "refcount_nonzero"


class ContentInvalid(TransitionError):
    reason = "content_invalid"

    def __init__(self, message: str, outcome: Any = None, index: int | None = None) -> None:
        super().__init__(message, outcome)
        self.index = index


class StillReferenced(TransitionError):
    reason = "still_referenced"


# iommu
class AlreadyMapped(SimError):
    pass


class MissingSelector(SimError):
    pass


class Unmapped(SimError):
    pass


class DmaFault(SimError):
    pass


# guest allocator
class OutOfMemory(SimError):
    pass


class NotAllocated(SimError):
    pass


class BadState(SimError):
    pass


# page-table cache
class CacheDisabled(SimError):
    pass


class DuplicateFrame(SimError):
    pass


class AlreadyEnabled(SimError):
    pass


class AlreadyDisabled(SimError):
    pass


# harness
class ConfigError(SimError):
    def __init__(self, line: int | None, reason: str) -> None:
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")
        self.line = line
        self.reason = reason


class InvariantViolation(SimError):
    """Internal corruption detected by an audit sweep; aborts a run."""
