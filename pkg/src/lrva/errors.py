class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration (CLI exit code 1)."""


class InvariantViolation(RuntimeError):
    """A checked runtime invariant failed (CLI exit code 2)."""
