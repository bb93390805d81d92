"""Error types shared across the simulator."""


class ConfigError(Exception):
    """Bad or inconsistent run configuration (CLI exit code 1)."""


class InvariantError(Exception):
    """An internal consistency check failed mid-run (CLI exit code 2)."""
