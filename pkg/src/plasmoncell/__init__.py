"""Adjoint shape optimization of the effective permittivity of periodic plasmonic cells."""

from .cellproblem import CellProblem, EffectiveTensor, effective_tensor
from .cost import CostConfig, CostEvaluator, evaluate_cost, penalty_density
from .geometry import Mesh, generate_reference_mesh, load_mesh, save_mesh
from .kinematics import MaterialParameters
from .optimizer import StageSchedule, optimize

__version__ = "0.1.0"

__all__ = [
    "CellProblem",
    "CostConfig",
    "CostEvaluator",
    "EffectiveTensor",
    "MaterialParameters",
    "Mesh",
    "StageSchedule",
    "effective_tensor",
    "evaluate_cost",
    "generate_reference_mesh",
    "load_mesh",
    "optimize",
    "penalty_density",
    "save_mesh",
]
