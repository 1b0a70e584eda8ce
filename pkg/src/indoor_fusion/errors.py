"""Exception types shared across the toolkit."""


class IndoorFusionError(Exception):
    """Base class for all library errors."""


class MalformedLine(IndoorFusionError):
    """A record line is not valid JSON."""


class SchemaViolation(IndoorFusionError):
    """A record line parses as JSON but violates the wire schema."""


class NegativeTime(SchemaViolation):
    """A record carries a timestamp before the session start."""


class TooFewAnchors(IndoorFusionError):
    """Trilateration needs at least three range observations."""


class CollinearAnchors(IndoorFusionError):
    """Anchor geometry is rank-deficient; no unique 2D fix exists."""


class EmptyObservations(IndoorFusionError):
    """The degenerate estimator received no observations at all."""


class InvalidOverride(IndoorFusionError):
    """A scenario override is inconsistent (e.g. anchor outside bounds)."""


class InsufficientOverlap(IndoorFusionError):
    """Too little common time span to estimate a clock model."""


class EmptyGroundTruth(IndoorFusionError):
    """Ground-truth labelling requires at least two trajectory samples."""


class DimensionMismatch(IndoorFusionError):
    """Feature vector length does not match what the consumer expects."""


class EmptyMap(IndoorFusionError):
    """A fingerprint query hit a radio map with no cells."""


class InsufficientData(IndoorFusionError):
    """Calibration needs more labelled snapshots than were supplied."""


class TooFewFrames(IndoorFusionError):
    """Dataset splitting needs at least a handful of frames."""


class Divergence(IndoorFusionError):
    """Training produced a non-finite loss; carries the history so far."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class LengthMismatch(IndoorFusionError):
    """Estimate and label sequences differ in length or timestamps."""


class EmptyReport(IndoorFusionError):
    """An error report over zero samples is undefined."""


class LayoutMismatch(IndoorFusionError):
    """Two frame sets do not share the same feature layout."""


class ConfigError(IndoorFusionError):
    """Bad CLI flag or configuration value (exit code 2)."""
