"""Conditioned-state simulation toolkit: localization trajectories, packet
collapse, Lindblad unravelling and branch trees of multipartite states."""

from .analysis import langevin_fit, localization_fit, pointer_scales
from .collapse import WeightState, collapse_ensemble, simulate_collapse
from .frames import EventScript, TensorState, build_branch_tree, joint_consistency
from .localization import (LocalizationParams, PotentialSpec, WaveFunction, evolve_ensemble,
                           evolve_trajectory, pointer_state)
from .master import DensityMatrix, trace_distance
from .numerics import Grid1D, RngStream
from .unravel import LindbladModel, adapt_and_decompose, verify_unravelling

__version__ = "0.1.0"

__all__ = [
    "DensityMatrix", "EventScript", "Grid1D", "LindbladModel", "LocalizationParams",
    "PotentialSpec", "RngStream", "TensorState", "WaveFunction", "WeightState",
    "adapt_and_decompose", "build_branch_tree", "collapse_ensemble", "evolve_ensemble",
    "evolve_trajectory", "joint_consistency", "langevin_fit", "localization_fit",
    "pointer_scales", "pointer_state", "simulate_collapse", "trace_distance",
    "verify_unravelling",
]
