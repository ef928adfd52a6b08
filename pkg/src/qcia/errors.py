"""Exception hierarchy shared by every qcia module.

All domain errors derive from :class:`QciaError` so the CLI can map them to
exit code 1 with a single ``except`` clause.
"""


class QciaError(Exception):
    """Base class for domain errors."""


# imageio / codec
class UnsupportedFormat(QciaError):
    pass


class CorruptStream(QciaError):
    pass


class ChannelMismatch(QciaError):
    pass


class IoFailure(QciaError):
    pass


class QualityOutOfRange(QciaError):
    pass


class ZeroDimension(QciaError):
    pass


# degrade
class InvalidClass(QciaError):
    pass


# neuralnet
class ShapeMismatch(QciaError):
    pass


class LabelOutOfRange(QciaError):
    pass


class TooManyParameters(QciaError):
    pass


class EmptyDataset(QciaError):
    pass


class VersionMismatch(CorruptStream):
    pass


class ChecksumMismatch(CorruptStream):
    pass


# qualitynet
class ImageTooSmall(QciaError):
    pass


class UntrainedModel(QciaError):
    pass


class DegenerateLevel(QciaError):
    """Level scores put all mass on the pristine index.

    :func:`qcia.qualitynet.fuse_quality` catches this internally and falls
    back to a uniform severity split; it is exposed for callers that want the
    strict behaviour.
    """


# routing
class InvalidK(QciaError):
    pass


class DimensionMismatch(QciaError):
    pass


class BadWeights(QciaError):
    pass


class MissingAnalyzer(QciaError):
    pass


# eval
class EmptyTestSet(QciaError):
    pass


class LengthMismatch(QciaError):
    pass


class MissingGroundTruth(QciaError):
    pass


class IncompleteInputs(QciaError):
    pass


# cli
class ValidationErrors(QciaError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
