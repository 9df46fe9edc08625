"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 for usage problems,
2 for data problems (files, shapes, signatures), 3 for evaluator failures.
"""


class BlockmergeError(Exception):
    exit_code = 2


class UsageError(BlockmergeError):
    exit_code = 1


class DataError(BlockmergeError):
    exit_code = 2


# checkpoint format
class MalformedHeader(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class TruncatedFile(DataError):
    pass


class IoFailure(DataError):
    pass


# merging
class ShapeMismatch(DataError):
    pass


class MissingBase(UsageError):
    pass


# segmentation
class UnknownParameter(DataError):
    pass


class SignatureMismatch(DataError):
    pass


# optimizer
class DimensionUnsupported(DataError):
    pass


class EmptyTrainingSet(DataError):
    pass


class NotFitted(BlockmergeError):
    pass


# evaluation
class MissingParameter(DataError):
    pass


class LengthMismatch(DataError):
    pass


class NonPositiveSource(DataError):
    pass


class EvaluatorFailure(BlockmergeError):
    exit_code = 3


class NonFiniteLoss(EvaluatorFailure):
    pass
