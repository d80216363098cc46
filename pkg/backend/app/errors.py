"""Exception hierarchy shared by the services, the CLI and the API routes."""

from typing import Optional


class RepmetricError(ValueError):
    """Base class for every domain error.

    Subclasses ValueError so route handlers can keep mapping ValueError to a client error.
    """

    exit_code = 2

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


# --------------------------
# Ingest
# --------------------------

class IngestError(RepmetricError):
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class MalformedHeader(IngestError):
    def __init__(self, reason: str, offset: int = 0, path: Optional[str] = None):
        super().__init__(f"malformed header at byte {offset}: {reason}", path)
        self.offset = offset


class RaggedRow(IngestError):
    def __init__(self, row: int, expected: Optional[int] = None, found: Optional[int] = None,
                 path: Optional[str] = None):
        detail = f"row {row} has {found} fields, expected {expected}" if expected is not None else f"row {row} is ragged"
        super().__init__(detail, path)
        self.row = row


class NonFiniteValue(IngestError):
    def __init__(self, row: int, path: Optional[str] = None):
        super().__init__(f"non-finite value in row {row}", path)
        self.row = row


class MalformedValue(IngestError):
    def __init__(self, row: int, path: Optional[str] = None):
        super().__init__(f"unparseable value in row {row}", path)
        self.row = row


class ZeroDimension(IngestError):
    def __init__(self, reason: str = "matrix has no rows or no columns", path: Optional[str] = None):
        super().__init__(reason, path)


class ZeroNormRow(IngestError):
    def __init__(self, index: int):
        super().__init__(f"row {index} has zero L2 norm")
        self.index = index


class DuplicateIDs(IngestError):
    def __init__(self, ids):
        shown = ", ".join(list(ids)[:5])
        super().__init__(f"duplicate sample ids: {shown}")
        self.ids = list(ids)


class EmptyIntersection(IngestError):
    def __init__(self):
        super().__init__("embedding sets share no sample ids")


class SampleTooLarge(IngestError):
    def __init__(self, n: int, available: int):
        super().__init__(f"cannot draw {n} samples from a set of {available}")
        self.n = n
        self.available = available


class LabelMismatch(IngestError):
    pass


# --------------------------
# Metrics
# --------------------------

class TooFewSamples(RepmetricError):
    pass


class NotNormalized(RepmetricError):
    def __init__(self, tag: str = ""):
        super().__init__(f"embedding set '{tag}' must be L2-normalized first")


class NoPositivePairs(RepmetricError):
    def __init__(self):
        super().__init__("no class has two or more samples; tolerance is undefined")


class NotAligned(RepmetricError):
    pass


class DegenerateInput(RepmetricError):
    pass


class KTooLarge(RepmetricError):
    def __init__(self, k: int, limit: int):
        super().__init__(f"k={k} exceeds the allowed maximum {limit}")
        self.k = k
        self.limit = limit


class MismatchedK(RepmetricError):
    pass


class MismatchedNodes(RepmetricError):
    pass


class EmptyTrain(RepmetricError):
    pass


class DimMismatch(RepmetricError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"feature dimension {found} does not match {expected}")


class KClassMismatch(RepmetricError):
    def __init__(self, k: int, num_classes: int):
        super().__init__(f"hungarian matching needs k == num_classes, got k={k}, classes={num_classes}")


class DegenerateLabels(RepmetricError):
    pass


class MisalignedPredictions(RepmetricError):
    pass


class InvalidParameter(RepmetricError):
    pass


# --------------------------
# Surface
# --------------------------

class ConfigInvalid(RepmetricError):
    exit_code = 1


class ReportSerializationError(RepmetricError):
    pass


class ReportIOError(RepmetricError):
    exit_code = 3
