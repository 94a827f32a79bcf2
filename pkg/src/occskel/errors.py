"""Exception types shared across the toolkit."""


class OccSkelError(Exception):
    """Base class for all toolkit errors."""


class ParseError(OccSkelError):
    def __init__(self, line, message="malformed record"):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptyCloud(OccSkelError):
    pass


class DegenerateCloud(OccSkelError):
    pass


class InvalidArchitecture(OccSkelError):
    pass


class DegenerateGradient(OccSkelError):
    pass


class CorruptCheckpoint(OccSkelError):
    pass


class AllDegenerate(OccSkelError):
    pass


class NonFiniteLoss(OccSkelError):
    pass


class InsufficientConvergence(OccSkelError):
    pass


class SolverDiverged(OccSkelError):
    pass


class ConfigError(OccSkelError):
    pass


class EmptyLevelSet(OccSkelError):
    pass
