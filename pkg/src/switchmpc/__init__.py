"""Model-predictive control for plants whose actuators need setup time.

The package models a set of actuator modes connected by a weighted digraph
of setup times, provides an admissibility calculus for mode/input sequences,
generates compact mixed-integer constraints that encode the setup rules,
and closes the loop with an embedded branch-and-bound MIQP solver.  A
thermal actuation case study and a chain-expansion baseline formulation are
included for benchmarking, plus a scenario-driven command line interface.
"""

from .digraph import (
    SetupConstraintMatrices,
    SetupDigraph,
    complete_from_strongly_connected,
    setup_constraint_matrices,
    validate_digraph,
)
from .model import (
    InputLayout,
    Operational,
    SwitchedActuatorModel,
    Switching,
    activator_of,
    duplicate_shared_inputs,
    post_mode,
    post_set,
)
from .admissibility import (
    assure_admissibility,
    is_admissible_actuator,
    is_admissible_pair,
    is_feasible_pair,
    min_switch_reconstruct,
    reconstruct_actuator_sequence,
)
from .errors import (
    CertificateFailedError,
    ConfigError,
    DiagonalNonzeroError,
    DimensionMismatchError,
    NonDistinctWeightsError,
    NotFeasibleError,
    NotOneSidedError,
    NotStronglyConnectedError,
    NumericalBreakdownError,
    SolverFailedError,
    SwitchMpcError,
    TriangleViolationError,
    UnstableDiscretizationError,
)
from .miqp import MiqpProblem, MiqpSolution, dump_problem, solve_miqp
from .qp import QpResult, solve_qp

__version__ = "0.1.0"
