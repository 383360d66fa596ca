"""Unsupervised deformable image registration with a convolutional network.

A network maps a (fixed, moving) image pair to a dense displacement field and
is trained by minimising a local cross-correlation plus diffusion-smoothness
energy through a differentiable warp. Everything is plain NumPy/SciPy with
hand-written backward passes.
"""
from .baseline import VarOptConfig, optimize_pair
from .evaluation import DiceReport, dice, evaluate_registration, export_field_rgb
from .loss import LossConfig, local_cc, total_loss
from .network import ArchConfig, NetworkParams, build_network, forward, load_params, model1, model2, save_params
from .synth import Pair, PhantomSpec, generate_pair, load_manifest, write_dataset
from .trainer import TrainConfig, select_model, sweep_lambda, train
from .volume_io import Volume, SegmentationMap, load_volume, save_volume
from .warp import identity_field, sample_linear, sample_nearest

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "DiceReport",
    "LossConfig",
    "NetworkParams",
    "Pair",
    "PhantomSpec",
    "SegmentationMap",
    "TrainConfig",
    "VarOptConfig",
    "Volume",
    "build_network",
    "dice",
    "evaluate_registration",
    "export_field_rgb",
    "forward",
    "generate_pair",
    "identity_field",
    "load_manifest",
    "load_params",
    "load_volume",
    "local_cc",
    "model1",
    "model2",
    "optimize_pair",
    "sample_linear",
    "sample_nearest",
    "save_params",
    "save_volume",
    "select_model",
    "sweep_lambda",
    "total_loss",
    "train",
    "write_dataset",
]
