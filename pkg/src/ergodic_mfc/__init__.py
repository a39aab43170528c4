"""Neural and finite-difference solvers for ergodic mean field control on the torus."""
from .model import (Coupling, ExactSolution, Field, FieldJet, ProblemSpec, hamiltonian_min,
                    manufactured_ftilde, running_cost, testcase)
from .net import NetworkArch, eval_jet, init_params, project_constraints

__version__ = "0.1.0"

__all__ = [
    "Coupling", "ExactSolution", "Field", "FieldJet", "ProblemSpec", "hamiltonian_min",
    "manufactured_ftilde", "running_cost", "testcase", "NetworkArch", "eval_jet",
    "init_params", "project_constraints",
]
