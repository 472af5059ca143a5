"""Error types shared across modules."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (bad dims, unknown keys...)."""


class CheckpointError(ValueError):
    """Unreadable, corrupt, or incompatible checkpoint."""
