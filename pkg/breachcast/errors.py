"""Exception hierarchy shared by the library and the command line.

Library code raises these; only :mod:`breachcast.cli` turns them into exit codes.
"""


class BreachcastError(Exception):
    """Base class of every error raised by breachcast."""

    exit_code = 1


class ConfigError(BreachcastError):
    """Usage or configuration problem."""

    exit_code = 2


class DataError(BreachcastError):
    """Input data cannot be used as given."""

    exit_code = 3


class ModelError(BreachcastError):
    """Learned artifacts are inconsistent with each other or with the input."""

    exit_code = 4


class EmbeddingError(DataError):
    """Raised when an embedding provider cannot produce states."""


# ---------------------------------------------------------------------------
# configuration

class InvalidConfigError(ConfigError, ValueError):
    pass


# ---------------------------------------------------------------------------
# trajectories and datasets

class MalformedDocumentError(DataError, ValueError):
    pass


class AnnotationOutOfRangeError(DataError, ValueError):
    pass


class AgentMismatchError(DataError, ValueError):
    pass


class EmptyDatasetError(DataError):
    pass


class DatasetLoadError(DataError):
    """Aggregates the per-file failures of a dataset load."""

    def __init__(self, failures):
        self.failures = dict(failures)
        lines = ["{}: {}".format(name, err) for name, err in sorted(self.failures.items())]
        super().__init__("failed to load {} file(s):\n  {}".format(len(self.failures), "\n  ".join(lines)))


class TooFewTrajectoriesError(DataError, ValueError):
    pass


class UnannotatedTrajectoryError(DataError, ValueError):
    pass


# ---------------------------------------------------------------------------
# numerics

class DimensionMismatchError(ModelError, ValueError):
    pass


class ShapeMismatchError(ModelError, ValueError):
    pass


class ZeroVectorError(DataError, ValueError):
    pass


class ZeroOutputError(ModelError, ValueError):
    pass


class IndexOutOfRangeError(ModelError, IndexError):
    pass


class EmptyListError(DataError, ValueError):
    pass


# ---------------------------------------------------------------------------
# embedding

class EmptyTaskError(DataError, ValueError):
    pass


class EmptyPromptError(DataError, ValueError):
    pass


class BadMagicError(EmbeddingError):
    pass


class TruncatedFileError(EmbeddingError):
    pass


class DimensionOverflowError(EmbeddingError):
    pass


class TransportError(EmbeddingError):
    """The embedding endpoint could not be reached."""

    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


class ProtocolError(EmbeddingError):
    """The embedding endpoint answered with something unusable."""


# ---------------------------------------------------------------------------
# training

class InsufficientFailuresError(DataError):
    pass


class NoSuccessDeltasError(DataError):
    pass


class TooFewPointsError(DataError):
    pass


class EmptyTrainingSetError(DataError):
    pass


class SingleClassCorpusError(DataError):
    pass


class TooFewSamplesError(DataError):
    pass


class EmptyRowsError(DataError):
    pass


# ---------------------------------------------------------------------------
# bundles

class ChecksumMismatchError(ModelError):
    pass


class VersionUnsupportedError(ModelError):
    pass


class InconsistentDimensionsError(ModelError):
    pass
