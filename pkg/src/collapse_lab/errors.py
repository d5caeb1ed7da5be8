"""Exception types raised across the lab."""


class LabError(Exception):
    """Base class for all lab errors."""


class SingularPoint(LabError):
    """Point too close to a nut, a Dirac string or another excluded set."""


class UnsupportedOrder(LabError):
    pass


class KMaxTooSmall(LabError):
    pass


class WindowTooSmall(LabError):
    pass


class LeftChartDomain(LabError):
    def __init__(self, msg, exit_point=None):
        super().__init__(msg)
        self.exit_point = exit_point


class NoConvergence(LabError):
    def __init__(self, msg, best=None, residual=None):
        super().__init__(msg)
        self.best = best
        self.residual = residual


class ScaleTooLarge(LabError):
    pass


class LeftBall(LabError):
    pass


class EmptyWindow(LabError):
    pass


class NonPositiveValue(LabError):
    pass


class ChartExceeded(LabError):
    pass


class NoLifts(LabError):
    pass


class QuadratureFailure(LabError):
    pass


class OpenFiber(LabError):
    pass


class ConfigError(LabError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path
