"""Exception types shared across the package."""


class MCILError(Exception):
    """Base class for all package errors."""


class InvalidConfig(MCILError):
    """A configuration value violates its documented constraints."""


class InvalidSplit(MCILError):
    """Requested task partition is impossible for the dataset."""


class IngestError(MCILError):
    """A feature file could not be parsed; message carries row context."""


class ShapeError(MCILError):
    """Tensor or label dimensions do not match the expected layout."""


class ProtocolError(MCILError):
    """The incremental-learning protocol was violated (ordering, double calls)."""


class ZeroVariance(MCILError):
    """A correlation operand is constant, so the coefficient is undefined."""


class MaskError(MCILError):
    """Every attention token was masked out."""


class DegeneratePrototype(MCILError):
    """A class prototype collapsed to (near) zero norm."""


class DegenerateFeature(MCILError):
    """A feature vector has (near) zero norm where a direction is required."""


class BatchTooSmall(MCILError):
    """The operation needs more samples than the batch provides."""


class ConfigError(MCILError):
    """Inconsistent runtime arguments (missing prototype, bad mixing weight)."""


class EmptyLedger(MCILError):
    """A metric was requested from a ledger with no completed stages."""


class CheckpointError(MCILError):
    """A checkpoint archive is missing, corrupt, or inconsistent."""
