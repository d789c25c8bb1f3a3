"""Conformal prediction for node classification on growing graphs."""

from .cp_core import (CoverageLawParams, DegenerateLaw, InsufficientCalibrationMass,
                      WeightedSample, beta_coverage_params, conformal_threshold,
                      hypergeom_cdf, nodeex_coverage_law, prediction_set,
                      transductive_coverage_law, weighted_quantile)
from .engines import EngineConfig, EvalPolicy, evaluate_sequence
from .evaluation import PredictionSetRecord
from .experiment import ExperimentConfig, run_experiment
from .graph_seq import ArrivalSchedule, Graph, GraphView, view_at
from .ingest import load_graph, save_graph
from .model import EquivariantClassifier, train

__version__ = "0.1.0"
