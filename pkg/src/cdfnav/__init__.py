"""Safe navigation with control density functions.

Density construction, control-affine plants, a small dense QP solver, the
divergence-constrained controllers, a CLF-CBF baseline, vehicle tracking
laws, and a closed-loop simulator.
"""
from .controller import ControllerConfig, NominalSpec, StepResult
from .density import DensityConfig, ObstacleSpec, eval_density
from .dynamics import PerturbationSpec
from .qp import QpProblem, solve
from .simulator import SimConfig, Trajectory, run, run_batch

__version__ = "0.1.0"

__all__ = [
    "ControllerConfig",
    "DensityConfig",
    "NominalSpec",
    "ObstacleSpec",
    "PerturbationSpec",
    "QpProblem",
    "SimConfig",
    "StepResult",
    "Trajectory",
    "eval_density",
    "run",
    "run_batch",
    "solve",
]
