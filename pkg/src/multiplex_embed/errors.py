"""Exception types shared across the package."""


class MultiplexError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(MultiplexError):
    """Malformed or inconsistent graph input."""


class ConfigError(MultiplexError):
    """Invalid configuration or violated precondition on user input."""


class NonFiniteError(MultiplexError):
    """A NaN or infinity appeared during a numeric computation."""
