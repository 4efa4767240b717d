"""Exception types. Each carries a category used by the CLI error prefix."""


class SubpError(ValueError):
    category = "error"


class ShapeError(SubpError):
    category = "shape"


class ConfigError(SubpError):
    category = "config"


class InvariantError(SubpError):
    category = "invariant"


class FormatError(SubpError):
    category = "format"


class InputError(SubpError):
    category = "input"


class DegenerateRowError(InvariantError):
    """Every block in a row group has zero l1 norm, so BPAR is undefined."""
