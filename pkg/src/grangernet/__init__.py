"""Joint estimation of sparse Granger-causality networks across multiple VAR models."""
from .exceptions import GrangerNetError, NumericalError, UnstableModelError, ValidationError
from .var_core import GroundTruthSpec, VarModel, VarPanel, generate_ground_truth, least_squares, simulate_panel, simulate_var
from .assembly import assemble
from .penalties import Kind, PenaltySpec, lambda_grid, make_penalty
from .solver import SolveResult, SolverOptions, solve
from .selection import select_model
from .evaluation import Scenario, SupportSet, classification_metrics, run_experiment
from .netanalysis import GcNetwork, centrality_difference, edge_betweenness, to_network

__all__ = [
    "GrangerNetError", "NumericalError", "UnstableModelError", "ValidationError",
    "GroundTruthSpec", "VarModel", "VarPanel", "generate_ground_truth", "least_squares", "simulate_panel",
    "simulate_var", "assemble", "Kind", "PenaltySpec", "lambda_grid", "make_penalty", "SolveResult",
    "SolverOptions", "solve", "select_model", "Scenario", "SupportSet", "classification_metrics",
    "run_experiment", "GcNetwork", "centrality_difference", "edge_betweenness", "to_network",
]
