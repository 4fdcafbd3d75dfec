"""Exception hierarchy shared across the package.

Every error raised on a documented failure path derives from SemgxError so
the CLI can map exception classes onto stable exit codes (config -> 1,
data -> 2, numerics -> 3).
"""


class SemgxError(Exception):
    """Base class for all package errors."""


class ConfigError(SemgxError):
    """Invalid or inconsistent configuration (bad field, dimension clash)."""


class ManifestError(SemgxError):
    """Dataset manifest missing, malformed, or referencing absent files."""


class TrialFormatError(SemgxError):
    """A trial file violates the trial contract (shape, rate, finiteness)."""


class OutputDirError(SemgxError):
    """Refusing to write a dataset into a non-empty directory."""


class InsufficientSamples(SemgxError):
    """Trial shorter than the requested window length."""


class FoldPlanError(SemgxError):
    """Cross-validation plan cannot be built from the manifest."""


class AugmentError(SemgxError):
    """Augmentation preconditions violated (e.g. mixup without a partner)."""


class WarpError(SemgxError):
    """Time-warp crop too short to interpolate."""


class NumericsError(SemgxError):
    """Non-finite value encountered in a forward or backward pass."""


class EvalError(SemgxError):
    """Evaluation called on inputs it cannot score."""


class DegenerateError(SemgxError):
    """Statistical test input carries no usable signal (all-zero differences)."""


class LeakageError(SemgxError):
    """Subject/trial isolation contract violated by a training step."""
