"""Exception types raised across the package."""


class CdfError(Exception):
    """Base class for all package errors."""


class DomainError(CdfError, ValueError):
    pass


class ParameterError(CdfError, ValueError):
    pass


class GeometryError(ParameterError):
    pass


class SingularityError(CdfError, ZeroDivisionError):
    pass


class Infeasible(CdfError):
    """No point satisfies all constraints.

    ``certificate`` holds nonnegative multipliers ``y`` with ``A.T @ y ~ 0`` and
    ``b @ y > 0`` (a Farkas certificate) when the solver produced one.
    """

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class IllConditioned(CdfError):
    pass


class DegenerateConstraint(CdfError):
    pass


class StuckInObstacle(CdfError):
    pass


class SampleInObstacle(CdfError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class EmptySample(CdfError):
    pass


class ZeroCommand(CdfError):
    pass


class SteeringSingular(CdfError):
    pass


class ConfigError(CdfError, ValueError):
    pass
