"""Exception hierarchy shared by every critmargin module."""


class CritMarginError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CritMarginError, ValueError):
    """Bad environment spec, run config, or cross-field inconsistency."""


class UsageError(CritMarginError, RuntimeError):
    """An object was used outside its contract (e.g. stepping a finished episode)."""


class SnapshotFormatError(CritMarginError, ValueError):
    """A snapshot or persisted table does not match the receiving object."""


class TrainingError(CritMarginError, RuntimeError):
    """Q-learning diverged."""


class CapacityError(CritMarginError, RuntimeError):
    """Exhaustive enumeration requested beyond its guard."""


class CollectionError(CritMarginError, RuntimeError):
    """Data collection could not select a time step."""


class TupleFormatError(CritMarginError, ValueError):
    """A tuple file line could not be parsed."""


class FitError(CritMarginError, ValueError):
    """Degenerate data for KDE fitting."""


class BuildError(CritMarginError, ValueError):
    """Percentile curves are inconsistent with each other."""


class ValidationError(CritMarginError, ValueError):
    """Cross-validation split produced an empty partition."""
