"""Exception types shared across the package."""


class DiffPolicyError(Exception):
    """Base class for package-specific errors."""


class RefusedScaleError(DiffPolicyError):
    """An exact/enumerative routine was asked for a problem too large."""


class SupportError(DiffPolicyError):
    """A distribution places mass where its reference has none."""


class EmptyBufferError(DiffPolicyError):
    """Sampling from a replay buffer with no entries."""


class GradientError(DiffPolicyError):
    """Non-finite gradients reached the optimizer."""


class ConfigError(DiffPolicyError):
    """Malformed or inconsistent run configuration."""


class TrainAbort(DiffPolicyError):
    """Training stopped on a non-finite loss; a diagnostic checkpoint was written."""
