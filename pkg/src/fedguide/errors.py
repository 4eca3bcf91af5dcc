"""Exception types shared across the simulator."""


class FedGuideError(Exception):
    """Base class for all simulator errors."""


class ContractViolation(FedGuideError):
    """An argument violated an operation's preconditions (shape, range, ...)."""


class DataFormatError(FedGuideError):
    """A delimited data file failed to parse; message names the line."""


class PartitionError(FedGuideError):
    """Partitioning could not satisfy its per-client constraints."""


class ConfigError(FedGuideError):
    """An experiment configuration is invalid; message names the field."""


class CheckpointError(FedGuideError):
    """A checkpoint file is corrupt or does not match the run configuration."""
