"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ProviderError -> 4.
"""


class OvimapError(Exception):
    pass


class ConfigError(OvimapError):
    """Invalid run configuration (bad threshold, missing seed, ...)."""


class DataError(OvimapError):
    """Missing, corrupt, or inconsistent dataset / map files."""


class ProviderError(OvimapError):
    """A feature provider violated its contract or is unavailable."""


class EmptySegmentError(OvimapError):
    """A segment had no pixels with usable depth; callers skip it."""
