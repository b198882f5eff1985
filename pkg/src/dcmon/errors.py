"""Exception hierarchy shared by every stage of the pipeline."""


class DcmonError(Exception):
    """Base class for all errors raised on bad input data."""


class MalformedHeader(DcmonError):
    pass


class TruncatedRecord(DcmonError):
    def __init__(self, message, stream=None):
        super().__init__(message)
        self.stream = stream


class UnorderedInput(DcmonError):
    pass


class MalformedRow(DcmonError):
    def __init__(self, message, row_index=None):
        super().__init__(message)
        self.row_index = row_index


class NonMonotonicTimestamp(DcmonError):
    def __init__(self, message, row_index=None):
        super().__init__(message)
        self.row_index = row_index


class InsufficientData(DcmonError):
    pass


class NoOverlap(DcmonError):
    pass


class LengthMismatch(DcmonError):
    pass


class TooFewSamples(DcmonError):
    pass


class EmptySeries(DcmonError):
    pass


class ManifestConflict(DcmonError):
    pass


class IoFailure(DcmonError):
    pass


class InvalidSpec(DcmonError):
    pass


class OutOfRange(DcmonError):
    pass
