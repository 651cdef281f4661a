"""Staged extended continuation problems with adjoint sensitivities."""

from .continuation import (ActiveSet, Chart, RunStore, Settings, continue_branch,
                           correct, solve_adjoint_direct, tangent)
from .problem import AugmentedSystem, ProblemBuilder, ProblemError, new_problem
from .storage import load_run, read_adjoint, read_solution, save_run

__all__ = [
    "ActiveSet", "AugmentedSystem", "Chart", "ProblemBuilder", "ProblemError", "RunStore",
    "Settings", "continue_branch", "correct", "load_run", "new_problem", "read_adjoint",
    "read_solution", "save_run", "solve_adjoint_direct", "tangent",
]
__version__ = "0.1.0"
