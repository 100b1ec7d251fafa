"""Exception types shared across the package."""


class ContractError(ValueError):
    """A documented precondition or invariant was violated by the caller."""


class GraphError(RuntimeError):
    """A computation graph is structurally broken (bad shapes, bad node refs)."""


class StageError(RuntimeError):
    """A pipeline stage cannot run, e.g. because an upstream artifact is missing."""
