"""Desk-scale domain-specific adaptive normalization for unsupervised
domain-generalization re-identification."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, no_grad, recording
from .clustering import ClusterAssignment, DbscanConfig, adjusted_mutual_info, dbscan, fowlkes_mallows
from .data import BatchSpec, SynthConfig, generate_synthetic, load_dataset
from .losses import TripletConfig, cross_entropy, total_loss, triplet_batch_hard
from .model import Backbone, ClassifierBank, ModelConfig, load_checkpoint, save_checkpoint
from .normalization import AffineParams, DomainBNState, DSANLayer, batch_norm_domain, dsan_forward, dson_forward, instance_norm
from .pipeline import TrainConfig, run
from .evaluation import EvalReport, cmc_curve, evaluate, export_embeddings, mean_average_precision, rank_gallery

__all__ = [
    "__version__",
    "Tape",
    "Tensor",
    "no_grad",
    "recording",
    "ClusterAssignment",
    "DbscanConfig",
    "adjusted_mutual_info",
    "dbscan",
    "fowlkes_mallows",
    "BatchSpec",
    "SynthConfig",
    "generate_synthetic",
    "load_dataset",
    "TripletConfig",
    "cross_entropy",
    "total_loss",
    "triplet_batch_hard",
    "Backbone",
    "ClassifierBank",
    "ModelConfig",
    "load_checkpoint",
    "save_checkpoint",
    "AffineParams",
    "DomainBNState",
    "DSANLayer",
    "batch_norm_domain",
    "dsan_forward",
    "dson_forward",
    "instance_norm",
    "TrainConfig",
    "run",
    "EvalReport",
    "cmc_curve",
    "evaluate",
    "export_embeddings",
    "mean_average_precision",
    "rank_gallery",
]
