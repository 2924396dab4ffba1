"""Exception types shared across the package."""


class DexDelayError(Exception):
    """Base class for all package errors."""


class CapacityExceeded(DexDelayError):
    """Submitting would exceed the maximum number of pending orders."""


class VolumeCapExceeded(DexDelayError):
    """Submitting would exceed the aggregate pending-volume cap."""


class NoPendingAtLevel(DexDelayError):
    """Execution requested at a priority level with no pending orders."""


class NoAdmissibleImpulse(DexDelayError):
    """No (level, size) candidate satisfies the pending caps."""


class NonPositivePrice(DexDelayError):
    """AMM formulas require a strictly positive pool price."""


class PoolDrain(DexDelayError):
    """Requested swap size would drain the constant-product pool."""


class StabilityViolation(DexDelayError):
    """Solved values escaped the quadratic growth envelope."""


class OffGrid(DexDelayError):
    """Requested coordinate is not a grid node."""


class ConfigError(DexDelayError):
    """Malformed run configuration."""


class MissingArtifact(DexDelayError):
    """A required solve/simulation artifact was not found."""
