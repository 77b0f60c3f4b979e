"""Exception types shared across the package."""


class MultilogueError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MultilogueError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MultilogueError, RuntimeError):
    """A precondition on call ordering or argument structure was violated."""


class InputError(MultilogueError, ValueError):
    """Caller-supplied data is invalid for the requested operation."""


class ConfigError(MultilogueError, ValueError):
    """A configuration is internally inconsistent or incompatible with data."""


class ParseError(MultilogueError, ValueError):
    """A dataset record could not be parsed."""


class SchemaError(MultilogueError, ValueError):
    """A dataset record parsed but violates the dataset schema."""


class FormatError(MultilogueError, ValueError):
    """A checkpoint file is corrupt, truncated, or of an unsupported version."""


class DegenerateError(MultilogueError, ValueError):
    """A metric is undefined for the given inputs."""
