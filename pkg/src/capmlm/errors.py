"""Exception hierarchy.

Every error raised on bad *input data* derives from :class:`DataError` so the
command line can map it to exit code 2; programming errors stay as the usual
built-in exceptions.
"""


class CapmlmError(Exception):
    """Base class for all package errors."""


class DataError(CapmlmError):
    """Input data is malformed or inconsistent."""


# capture ingest
class BadMagic(DataError):
    pass


class CorruptHeader(DataError):
    pass


class MalformedXml(DataError):
    pass


class EmptyDocument(DataError):
    pass


# tokenizer / chunker
class EmptyCorpus(DataError):
    pass


class AllPad(DataError):
    pass


class IdOutOfRange(DataError):
    pass


# model
class ShapeMismatch(DataError):
    pass


class DegenerateLogits(DataError):
    pass


class EmptyMask(DataError):
    pass


class MissingTrace(CapmlmError):
    pass


class NonFiniteGradient(CapmlmError):
    pass


class EmptySet(DataError):
    pass


class DivergedLoss(CapmlmError):
    pass


class VocabHashMismatch(DataError):
    pass


# failure detection
class EmptyMetrics(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateCovariance(DataError):
    pass


class UnfittedModel(CapmlmError):
    pass


# reporting
class VerdictIsSuccess(DataError):
    pass


class IdMismatch(DataError):
    pass


# synthetic corpus
class EmptyGrammar(DataError):
    pass


class InsufficientCaptures(DataError):
    pass
