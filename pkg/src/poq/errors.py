"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class InfeasibleAssignment(ValueError):
    """The label set cannot be covered by the available object queries."""
