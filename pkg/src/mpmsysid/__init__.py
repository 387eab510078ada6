"""Differentiable MLS-MPM simulation and physical parameter identification
for elastoplastic bodies manipulated by rigid effectors."""
from .errors import (AdjointError, DegenerateMatrixError, DomainError, InstabilityError,
                     OutOfDomainError, SimulationError)
from .geometry import HeightMap, NoiseConfig, PointSet, Trajectory
from .sim import HAND_PICKED, PARAM_BOX, PARAM_NAMES, ParticleSystem, PhysicsParams, SceneConfig

__version__ = "0.1.0"
