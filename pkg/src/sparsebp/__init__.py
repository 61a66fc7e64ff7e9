"""Sparse-view CT reconstruction with a convolutional backprojection generator.

A generator network maps stacked single-view backprojections to an image;
a differentiable rotate-and-sum projector maps the image back to sinogram
space, so training only ever compares sinograms. Filtered backprojection
is provided as the classical baseline.
"""

from .geometry import Sinogram, fbp_reconstruct, radon_forward, single_view_backprojections, uniform_angles
from .metrics import mse, pearson_corr, psnr, run_experiment_grid
from .model import generator_forward, init_params, projector_forward
from .phantoms import PhantomSpec, apply_nonuniformity, make_phantom_volume, sample_sensor_model
from .pipeline import TrainConfig, VolumeDataset, reconstruct, simulate_volume, train

__all__ = [
    "Sinogram",
    "uniform_angles",
    "radon_forward",
    "single_view_backprojections",
    "fbp_reconstruct",
    "init_params",
    "generator_forward",
    "projector_forward",
    "TrainConfig",
    "VolumeDataset",
    "simulate_volume",
    "train",
    "reconstruct",
    "PhantomSpec",
    "make_phantom_volume",
    "sample_sensor_model",
    "apply_nonuniformity",
    "mse",
    "psnr",
    "pearson_corr",
    "run_experiment_grid",
]
