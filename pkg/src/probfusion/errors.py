"""Exception hierarchy shared by all stages."""


class ProbFusionError(Exception):
    """Base class for every error raised by the library."""


class NonPositiveDepth(ProbFusionError, ValueError):
    pass


class NonPositiveInverseDepth(ProbFusionError, ValueError):
    pass


class DimensionMismatch(ProbFusionError, ValueError):
    pass


class InvalidPose(ProbFusionError, ValueError):
    pass


class InsufficientKeyframes(ProbFusionError, ValueError):
    pass


class EmptyGraph(ProbFusionError, ValueError):
    pass


class NotPositiveDefinite(ProbFusionError, ArithmeticError):
    """Reduced camera matrix failed to factor; raise the damping."""


class DivergenceDetected(ProbFusionError, RuntimeError):
    pass


class AllZeroWeights(ProbFusionError, ValueError):
    pass


class EmptyMesh(ProbFusionError, ValueError):
    pass


class EmptyCloud(ProbFusionError, ValueError):
    pass


class InsufficientPoints(ProbFusionError, ValueError):
    pass


class NoCorrespondences(ProbFusionError, RuntimeError):
    pass


class FormatError(ProbFusionError, ValueError):
    """A binary or text artifact does not match its documented layout."""


class ConfigError(ProbFusionError, ValueError):
    pass


class MissingArtifact(ProbFusionError, FileNotFoundError):
    pass
