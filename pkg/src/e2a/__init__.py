"""Energy-guided augmentation for graph classifiers under distribution shift."""

from .autodiff import Tape, Tensor, adam_init, adam_step, backward, finite_diff_check
from .cvae import CvaeConfig, decode, encode, init_cvae, sample_pseudo_id
from .errors import E2AError
from .gnn import ModelConfig, TrainConfig, embed, evaluate, gin_forward, init_model, load_checkpoint, train_erm
from .landscape import energy, margin, margin_radius, multiclass_energy_bounds, oracle_radius
from .pipeline import E2AConfig, ablate, calibration_loss, explore, run_e2a
from .syngraph import Graph, GraphDataset, MotifConfig, dataset_load, dataset_save, make_motif_dataset

__all__ = [
    "Tape",
    "Tensor",
    "adam_init",
    "adam_step",
    "backward",
    "finite_diff_check",
    "CvaeConfig",
    "decode",
    "encode",
    "init_cvae",
    "sample_pseudo_id",
    "E2AError",
    "ModelConfig",
    "TrainConfig",
    "embed",
    "evaluate",
    "gin_forward",
    "init_model",
    "load_checkpoint",
    "train_erm",
    "energy",
    "margin",
    "margin_radius",
    "multiclass_energy_bounds",
    "oracle_radius",
    "E2AConfig",
    "ablate",
    "calibration_loss",
    "explore",
    "run_e2a",
    "Graph",
    "GraphDataset",
    "MotifConfig",
    "dataset_load",
    "dataset_save",
    "make_motif_dataset",
]
