"""One-step-ahead sequential Super Learner for panels of dependent units, with bound checks."""
from .core import DataError, DependencyGraph, LossSpec, PanelDataset, RiskLedger, TimeSlice, UnitObservation
from .ensemble import MetaDesign, MetaMethod, SequentialSuperLearner, continuous_select, convex_grid_select
from .learners import LearnerFamily, LearnerSpec, PredictorSnapshot, refit
from .simulator import DgpConfig, generate

__version__ = "0.1.0"

__all__ = [
    "DataError", "DependencyGraph", "LossSpec", "PanelDataset", "RiskLedger", "TimeSlice", "UnitObservation",
    "MetaDesign", "MetaMethod", "SequentialSuperLearner", "continuous_select", "convex_grid_select",
    "LearnerFamily", "LearnerSpec", "PredictorSnapshot", "refit", "DgpConfig", "generate",
]
