"""Exception hierarchy shared across the package."""


class AdvlabError(Exception):
    """Base class for all advlab errors."""


class DimensionError(AdvlabError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(AdvlabError, ValueError):
    """An argument lies outside the domain of an operation."""


class UsageError(AdvlabError, RuntimeError):
    """An API was called in an invalid state."""


class SpecError(AdvlabError, ValueError):
    """A model specification is invalid."""


class CompatibilityError(AdvlabError, ValueError):
    """Two parameter vectors do not share a layout."""


class ConfigError(AdvlabError, ValueError):
    """A configuration value is invalid."""


class DatasetError(AdvlabError, ValueError):
    """A dataset file could not be read."""


class ParseError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class AttackError(AdvlabError, RuntimeError):
    """An attack produced a non-finite gradient."""


class TrainingError(AdvlabError, RuntimeError):
    """Training was aborted, e.g. on a non-finite loss."""


class CheckpointFormatError(AdvlabError, ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class DegenerateInputError(AdvlabError, ValueError):
    pass
