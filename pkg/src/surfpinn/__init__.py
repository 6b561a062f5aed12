"""Shallow physics-informed networks for PDEs on static and evolving surfaces."""

from .errors import (ConfigurationError, GeometryError, IntegrationError,
                     MetricError, OptimizerStalled, ProjectionError,
                     SamplingError)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "GeometryError", "IntegrationError", "MetricError",
    "OptimizerStalled", "ProjectionError", "SamplingError",
]
