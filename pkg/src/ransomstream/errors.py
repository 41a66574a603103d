"""Exception hierarchy shared across the package."""


class RansomStreamError(Exception):
    """Base class for every error raised by this package."""


# event parsing
class EventError(RansomStreamError):
    pass


class MalformedJson(EventError):
    pass


class UnknownEventId(EventError):
    pass


class MissingRequired(EventError):
    pass


class InvalidLabel(EventError):
    pass


# embedding / preprocessing
class EmptyToken(RansomStreamError):
    pass


class UnknownFeature(RansomStreamError):
    pass


class DimensionMismatch(RansomStreamError, ValueError):
    pass


class TooFewRows(RansomStreamError, ValueError):
    pass


class SingleClassBatch(RansomStreamError):
    pass


class TooFewMinority(RansomStreamError, ValueError):
    pass


# neural
class SequenceTooShort(RansomStreamError, ValueError):
    pass


class ShapeMismatch(RansomStreamError, ValueError):
    pass


class NonFiniteLoss(RansomStreamError, FloatingPointError):
    pass


class UnknownGroup(RansomStreamError, KeyError):
    pass


# engine
class FeatureSetChanged(RansomStreamError):
    def __init__(self, old, new):
        super().__init__(f"feature set changed: {sorted(old)} -> {sorted(new)}")
        self.old = list(old)
        self.new = list(new)


class TrainingDiverged(RansomStreamError):
    pass


class EmptyHistory(RansomStreamError):
    pass


class CheckpointError(RansomStreamError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CheckpointUnavailable(CheckpointError):
    pass


# metrics / harness
class LengthMismatch(RansomStreamError, ValueError):
    pass


class InvalidConfig(RansomStreamError, ValueError):
    pass


class InputUnavailable(RansomStreamError):
    pass


class UnlabeledStream(RansomStreamError):
    pass
