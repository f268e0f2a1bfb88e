"""Discrete-time optimal control on SO(3) x R^n with frequency constraints.

The package has two faces. :func:`lieocp.solver.solve` synthesizes extremals
of a constrained optimal control problem whose controls must avoid chosen
DFT bins, and :func:`lieocp.pmp.kkt_check` certifies any candidate
trajectory against the discrete maximum principle.
"""

from . import lie, spectrum
from .dynamics import (
    AttitudePlant,
    AttitudeState,
    InertiaData,
    LinearPlant,
    Plant,
    SystemTrajectory,
    rollout,
    solve_relative_rotation,
)
from .errors import *  # noqa: F401,F403
from .pmp import AdjointBundle, KKTReport, adjoint_backward, kkt_check
from .problem import ProblemSpec, QuadraticControlCost
from .solver import SolveResult, SolverOptions, project_feasible, solve
from .spectrum import ForbiddenBinSpec, FrequencyConstraintSet, build_constraints

__version__ = "0.1.0"
