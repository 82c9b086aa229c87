"""Spatial stochastic reaction networks: exact particle simulation, the
deterministic density limit and the hybrid jump-flow limit."""

from .errors import (ExplosionError, JumpGuardError, LogicError, NumericError, SpatialCRNError,
                     ValidationError)
from .geometry import DomainSpec, KernelSpec, MotionSpec
from .network import NetworkSpec, ReactionSpec, SpeciesSpec, load_config, parse_network
from .state import ObservableSpec, ParticleMeasure

__version__ = "0.1.0"
