"""Semi-explicit time integration of poroelastic systems via a delay reformulation."""

from .config import ConfigError, RunConfig
from .models import (NetworkSystem, PoroParams, ToyTwoField, TwoFieldSystem, build_from_config,
                     build_network, build_toy, build_two_field, coupling_constants)
from .steppers import (DivergenceDetected, ImplicitEuler, SemiExplicitEuler, Trajectory,
                       integrate)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "NetworkSystem", "PoroParams", "ToyTwoField", "TwoFieldSystem",
    "build_from_config", "build_network", "build_toy", "build_two_field", "coupling_constants",
    "DivergenceDetected", "ImplicitEuler", "SemiExplicitEuler", "Trajectory", "integrate",
]
