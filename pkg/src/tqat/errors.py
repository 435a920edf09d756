class FormatError(ValueError):
    """A serialized artifact is truncated, corrupt, or has the wrong magic/version."""


class CompatibilityError(ValueError):
    """A checkpoint does not match the model configuration it is loaded into."""


class ContractError(RuntimeError):
    """An operation was invoked in a state its contract forbids."""
