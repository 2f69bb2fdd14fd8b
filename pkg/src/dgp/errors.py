"""Exception types shared across the package."""


class DgpError(Exception):
    """Base class for package-specific failures."""


class ConvergenceError(DgpError):
    """Iterative factorization failed to converge within its sweep cap."""


class ConfigError(DgpError):
    """Bad configuration file, key, or override."""


class DatasetError(DgpError):
    """Dataset file missing, malformed, or inconsistent."""


class CheckpointError(DgpError):
    """Checkpoint payload malformed or incompatible with the network."""


class TrainingDiverged(DgpError):
    """Loss became non-finite during training."""
