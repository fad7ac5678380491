# correspondence_transfer/errors.py


class CorrespondenceError(Exception):
    """Base class for every error raised by the pipeline."""
    exit_code = 1


class DimensionError(CorrespondenceError):
    pass


class StripeError(CorrespondenceError):
    pass


class CountMismatchError(CorrespondenceError):
    pass


class IndexRangeError(CorrespondenceError):
    pass


class NumericalError(CorrespondenceError):
    pass


class SolverSizeError(CorrespondenceError):
    pass


class DegeneratePoseError(CorrespondenceError):
    pass


class BinRangeError(CorrespondenceError):
    pass


class NoValidEntriesError(CorrespondenceError):
    pass


class InsufficientDataError(CorrespondenceError):
    pass


class SingularCovarianceError(CorrespondenceError):
    pass


class MissingGroundTruthError(CorrespondenceError):
    pass


class FeatureFileError(CorrespondenceError):
    exit_code = 3


class StoreFormatError(CorrespondenceError):
    pass


class ManifestError(CorrespondenceError):
    exit_code = 2

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class MissingDataError(CorrespondenceError):
    exit_code = 3

    def __init__(self, path, message: str = "data file not found"):
        self.path = str(path)
        super().__init__(f"{message}: {self.path}")


class ConfigError(CorrespondenceError):
    exit_code = 4


class LayoutMismatchError(CorrespondenceError):
    exit_code = 5
