"""Exception and warning types raised across the package."""


class AbcrError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(AbcrError, ValueError):
    pass


class DegenerateSample(AbcrError, ValueError):
    pass


class NonConvergence(AbcrError, RuntimeError):
    """An iterative numerical routine exhausted its budget."""


# Solvers and quadrature share the same failure mode.
NoConvergence = NonConvergence


class SingularV(AbcrError, ValueError):
    pass


class RankDeficientX(AbcrError, ValueError):
    pass


class SingularH(AbcrError, ValueError):
    pass


class NonFiniteDerivative(AbcrError, ArithmeticError):
    pass


class PriorUnsupported(AbcrError, ValueError):
    pass


class CalibrationFailed(AbcrError, RuntimeError):
    pass


class NewtonFailure(AbcrError, RuntimeError):
    pass


class GridTooNarrow(AbcrError, ValueError):
    pass


class ConfigError(AbcrError, ValueError):
    pass


class StuckChainWarning(RuntimeWarning):
    pass


class VarianceFloorWarning(RuntimeWarning):
    pass
