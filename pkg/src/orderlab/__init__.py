"""orderlab: estimate how the order of training batches changes an Adam-trained
model, without retraining for every order."""

from .errors import (ConfigError, CorruptionError, DependencyError, DivergenceError, IngestionError, InputError,
                     NumericError, OrderLabError, PersistenceError, ShapeError, StoreError, TrainingError)
from .numerics import ParamVector, ProjectionSpec, derive_seed, jl_min_dim, project, pseudoinverse, recover
from .data import Batch, Corpus, IngestConfig, ingest, load_corpus, save_corpus, synth_regression, synth_text
from .models import MLPRegressor, QuadraticModel, TinyLM, build_model
from .trainer import (AdamConfig, AdamState, ReferenceTrajectory, adam_step, load_trajectory, retrain_oracle,
                      save_trajectory, train_reference)
from .store import StoreOptions, UpdateTermStore, build_store, compute_terms, load_store, save_store
from .estimator import FUT, FUTPP, EstimatorConfig, estimate, estimate_performance
from .curriculum import GAConfig, baseline_order, ga_search, genetic_search, pmx_crossover
from .analysis import absdiff, absdiff_eval, generalization_curves, memorization_heatmap, timing_compare

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptionError",
    "DependencyError",
    "DivergenceError",
    "IngestionError",
    "InputError",
    "NumericError",
    "OrderLabError",
    "PersistenceError",
    "ShapeError",
    "StoreError",
    "TrainingError",
    "ParamVector",
    "ProjectionSpec",
    "derive_seed",
    "jl_min_dim",
    "project",
    "pseudoinverse",
    "recover",
    "Batch",
    "Corpus",
    "IngestConfig",
    "ingest",
    "load_corpus",
    "save_corpus",
    "synth_regression",
    "synth_text",
    "MLPRegressor",
    "QuadraticModel",
    "TinyLM",
    "build_model",
    "AdamConfig",
    "AdamState",
    "ReferenceTrajectory",
    "adam_step",
    "load_trajectory",
    "retrain_oracle",
    "save_trajectory",
    "train_reference",
    "StoreOptions",
    "UpdateTermStore",
    "build_store",
    "compute_terms",
    "load_store",
    "save_store",
    "FUT",
    "FUTPP",
    "EstimatorConfig",
    "estimate",
    "estimate_performance",
    "GAConfig",
    "baseline_order",
    "ga_search",
    "genetic_search",
    "pmx_crossover",
    "absdiff",
    "absdiff_eval",
    "generalization_curves",
    "memorization_heatmap",
    "timing_compare",
]
