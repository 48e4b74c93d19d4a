"""Dynamic matrix factorization of node x metric x time resource-usage data."""

__version__ = "0.1.0"

from .cube import IngestConfig, IngestError, UsageCube, load_csv, normalize, load_cube, save_cube
from .model import LatentModel, gradients, objective, reconstruct_cell, reconstruct_slice
from .adam import AdamState, adam_step
from .trainer import FitConfig, FitError, FitReport, fit, init_model, k_sweep
from .anomaly import AnomalyScoreSeries, Event, align_events, flag, score
from .analysis import latent_correlations, pca_2d
from .baseline import CPModel, cp_als_fit, cp_node_scores
from .synth import GroundTruth, Injection, SynthSpec, evaluate_detector, generate

__all__ = [
    "AdamState",
    "AnomalyScoreSeries",
    "CPModel",
    "Event",
    "FitConfig",
    "FitError",
    "FitReport",
    "GroundTruth",
    "IngestConfig",
    "IngestError",
    "Injection",
    "LatentModel",
    "SynthSpec",
    "UsageCube",
    "adam_step",
    "align_events",
    "cp_als_fit",
    "cp_node_scores",
    "evaluate_detector",
    "fit",
    "flag",
    "generate",
    "gradients",
    "init_model",
    "k_sweep",
    "latent_correlations",
    "load_csv",
    "load_cube",
    "normalize",
    "objective",
    "pca_2d",
    "reconstruct_cell",
    "reconstruct_slice",
    "save_cube",
    "score",
]
