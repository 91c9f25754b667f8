"""Quantized-latent autoencoders and InfoMEC disentanglement metrics."""

from .autoencoder import ModelState, TrainConfig, embed, init_state, load_checkpoint, save_checkpoint, train
from .infomec import EvalSample, InfoMecResult, NmiReport, infomec, nmi_matrix
from .quantization import CodebookArray, init_codebooks, quantize
from .world import Dataset, SourceSpace, build_dataset, default_space, load_dataset, render, save_dataset

__version__ = "0.1.0"

__all__ = [
    "CodebookArray",
    "Dataset",
    "EvalSample",
    "InfoMecResult",
    "ModelState",
    "NmiReport",
    "SourceSpace",
    "TrainConfig",
    "build_dataset",
    "default_space",
    "embed",
    "infomec",
    "init_codebooks",
    "init_state",
    "load_checkpoint",
    "load_dataset",
    "nmi_matrix",
    "quantize",
    "render",
    "save_checkpoint",
    "save_dataset",
    "train",
]
