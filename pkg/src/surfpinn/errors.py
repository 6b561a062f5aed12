"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Bad user-facing configuration (unknown surface, preset, option...)."""


class GeometryError(RuntimeError):
    """Degenerate geometry: vanishing level-set gradient, singular metric."""


class ProjectionError(RuntimeError):
    """Newton projection onto the zero level set failed to converge."""


class SamplingError(RuntimeError):
    """Surface sampling rejected essentially every draw (bad bounding box)."""


class MetricError(ValueError):
    """Ill-posed error metric, e.g. relative error against a zero norm."""


class IntegrationError(RuntimeError):
    """Surface quadrature hit a degenerate parametrization."""


class OptimizerStalled(RuntimeError):
    """The optimizer could not make progress; carries the best result so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
