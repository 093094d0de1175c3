"""Exception hierarchy shared by all certens modules."""


class CertensError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self):
        return type(self).__name__


class InvalidModel(CertensError):
    pass


class InvalidIndex(CertensError):
    pass


class InvalidScale(CertensError):
    pass


class InvalidInput(CertensError):
    pass


class TrainingDiverged(CertensError):
    pass


class Unsupported(CertensError):
    pass


class UnsupportedNorm(Unsupported):
    pass


class InvalidInterval(CertensError):
    pass


class NumericalFailure(CertensError):
    pass


class NormalizerDegenerate(CertensError):
    pass


class DegenerateMass(CertensError):
    pass


class SolverInconsistency(CertensError):
    pass


class MonotonicityViolation(CertensError):
    pass


class TooLargeForFD(CertensError):
    pass


class EmptyDataset(CertensError):
    pass


class ConfigError(CertensError):
    pass


class CacheFormatError(CertensError):
    pass
