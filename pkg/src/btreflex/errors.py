"""Exception hierarchy shared across the package."""

from __future__ import annotations


class BTReflexError(Exception):
    """Base class for every error raised by this package."""


# -- behavior tree parsing / execution ---------------------------------------


class PlanParseError(BTReflexError):
    """Base for everything that makes XML unusable as a plan."""


class BTSyntaxError(PlanParseError):
    """Malformed XML."""


class SchemaError(PlanParseError):
    """Well-formed XML that violates the plan schema (tag, arity, params)."""


class UnknownActionError(PlanParseError):
    """Leaf names an action or condition outside the registered action space."""


class BlackboardKeyError(BTReflexError, KeyError):
    def __init__(self, key: str, node_id: str | None = None):
        super().__init__(key)
        self.key = key
        self.node_id = node_id

    def __str__(self) -> str:
        where = f" (node {self.node_id})" if self.node_id else ""
        return f"blackboard key {self.key!r} is not set{where}"


class ExecutorFault(BTReflexError):
    """A leaf executor crashed. Distinct from a leaf returning Failure."""

    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message)
        self.node_id = node_id


# -- simulator ----------------------------------------------------------------


class UnknownAction(BTReflexError):
    pass


class UnknownTask(BTReflexError):
    pass


# -- state capture / cmsr -----------------------------------------------------


class DoubleCaptureError(BTReflexError):
    pass


class EmptyMissionError(BTReflexError):
    pass


class SequenceTooShort(BTReflexError):
    pass


# -- evaluation ---------------------------------------------------------------


class NoGoalSpec(BTReflexError):
    pass


class LengthMismatch(BTReflexError, ValueError):
    pass


class MetricsUndefined(BTReflexError, ValueError):
    """No ground-truth failures, so Det/Loc/Exp have a zero denominator."""


# -- refinement ---------------------------------------------------------------


class RepairError(BTReflexError):
    pass


class NoFlawFound(RepairError):
    pass


class UnconstructibleRepair(RepairError):
    pass


class AnchorNotFound(RepairError):
    pass


class ValidationFailure(RepairError):
    """A repair would produce an invalid tree; the tree is left untouched."""


class StalePrecondition(RepairError):
    """The operation would not change anything, so its precondition is gone."""


# -- experience base ----------------------------------------------------------


class PersistenceError(BTReflexError):
    pass


# -- llm gateway --------------------------------------------------------------


class GatewayError(BTReflexError):
    pass


class AuthError(GatewayError):
    pass


class GatewayTimeout(GatewayError, TimeoutError):
    pass


class RateLimitError(GatewayError):
    pass


class MockUnmatchedError(GatewayError):
    def __init__(self, digest: str):
        super().__init__(f"no mock script entry matches request {digest}")
        self.digest = digest


class MalformedResponse(GatewayError):
    """Response failed its contract validator after the allowed retry."""


class MalformedVerdict(MalformedResponse):
    pass
