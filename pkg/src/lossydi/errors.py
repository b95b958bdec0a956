"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class StateError(RuntimeError):
    """An object was used in a state that does not support the call."""


class ParseError(ValueError):
    """A binary stream could not be decoded."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BudgetError(ValueError):
    """A message-size budget is too small for the requested codec."""


class ConfigError(ValueError):
    """Invalid configuration value."""
