"""Exception types raised across the pipeline."""


class AkipipeError(Exception):
    """Base class for all pipeline errors."""


# --- table ingestion ---

class MissingColumn(AkipipeError):
    pass


class UnparseableTimestamp(AkipipeError):
    pass


class DuplicateStayId(AkipipeError):
    pass


class NonPositiveValue(AkipipeError):
    pass


class NegativeTime(AkipipeError):
    pass


class InvalidSpec(AkipipeError):
    pass


# --- cohort labeling / splitting ---

class NoBaselineMeasurement(AkipipeError):
    pass


class UnbalanceableSplit(AkipipeError):
    pass


# --- vocabulary / tokenization ---

class MissingSpecialToken(AkipipeError):
    pass


class DuplicateToken(AkipipeError):
    pass


# --- encoder ---

class IdOutOfRange(AkipipeError):
    pass


class SequenceTooLong(AkipipeError):
    pass


class CorruptCheckpoint(AkipipeError):
    pass


class ShapeMismatch(AkipipeError):
    pass


class IncompatibleArchitecture(AkipipeError):
    pass


# --- training ---

class InsufficientCorpus(AkipipeError):
    pass


class NonFiniteLoss(AkipipeError):
    pass


class SingleClassData(AkipipeError):
    pass


# --- evaluation ---

class LengthMismatch(AkipipeError):
    pass


class AllResamplesUndefined(AkipipeError):
    pass


# --- rendering ---

class IoError(AkipipeError):
    pass
