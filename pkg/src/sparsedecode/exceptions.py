"""Exception types shared across the package."""


class EmptyCacheError(ValueError):
    """Attention was requested for a sequence with no cached keys."""


class CapacityError(RuntimeError):
    """The KV cache or position table cannot hold another token."""


class UndefinedRecallError(ValueError):
    """Recall is undefined because the label matrix has no positive entries."""


class ConfigurationError(RuntimeError):
    """A required component (router, table entry, weight block) is missing."""
