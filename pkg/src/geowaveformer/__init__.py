"""Geometry-adaptive waveformer: a neural operator for time-dependent fields
on irregular 3-D point clouds, built on a small numpy autodiff engine."""

from .data import Dataset, NormStats, gen_synthetic, load_dataset, save_dataset
from .geometry import LatentGrid, PointCloud, build_latent_grid
from .model import GeometryWaveformer, ModelConfig, preset
from .rollout import predict_steps, progressive_predict
from .train import TrainConfig, fit, lr_at, relative_mse
from .uq import EnsembleSpec, ensemble_run, perturb_initial

__version__ = "0.1.0"
