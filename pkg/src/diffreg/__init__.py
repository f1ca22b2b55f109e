"""Refine a scalar regressor by predicting signed label differences to
retrieved reference samples."""

__version__ = "0.1.0"

from .baseline import RidgeModel, fit_ridge, fit_ridge_baseline
from .dar import DarConfig, DarParams, aggregate_refinement, forward, init_params
from .dataset import Dataset, GroupDef, Sample, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .dataset import subject_exclusive_split
from .error_model import ErrorModel, UniformErrorModel, fit_error_kde, kde_density, sample_error
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DiffRegError,
    InputError,
    NumericError,
    RetrievalError,
)
from .evaluation import error_histograms, evaluate_model, group_bias_report, mean_absolute_error
from .pipeline import Pipeline, load_checkpoint, predict, refine, refine_iteration, save_checkpoint
from .retrieval import ReferenceIndex, RetrievalConfig, build_reference_index, retrieve_references
from .training import TrainConfig, train_dar

__all__ = [
    "CheckpointError", "ConfigError", "DarConfig", "DarParams", "DataError", "Dataset", "DiffRegError",
    "ErrorModel", "GroupDef", "InputError", "NumericError", "Pipeline", "ReferenceIndex", "RetrievalConfig",
    "RetrievalError", "RidgeModel", "Sample", "SynthConfig", "TrainConfig", "UniformErrorModel",
    "aggregate_refinement", "build_reference_index", "error_histograms", "evaluate_model", "fit_error_kde",
    "fit_ridge", "fit_ridge_baseline", "forward", "generate_synthetic", "group_bias_report", "init_params",
    "kde_density", "load_checkpoint", "load_dataset", "mean_absolute_error", "predict", "refine",
    "refine_iteration", "retrieve_references", "sample_error", "save_checkpoint", "save_dataset",
    "subject_exclusive_split", "train_dar",
]
