"""Multi-sensor (lidar, SAR, optical) raster fusion, FCN segmentation and swarm tuning.

Submodules: ``tensor`` (conv/activation/loss math), ``model`` (the FCN and its
training loop), ``raster`` and ``modelio`` (binary formats), ``fusion``
(denoising, alignment, constraint audits), ``pso`` (particle swarm),
``metrics`` (scoring), ``synthgen`` (synthetic scenes) and ``cli``.
"""

from .kernels import BACKEND
from .model import FcnConfig, FcnModel, build_fcn, forward, predict, train
from .raster import LabelMap, Modality, Raster

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FcnConfig",
    "FcnModel",
    "LabelMap",
    "Modality",
    "Raster",
    "build_fcn",
    "forward",
    "predict",
    "train",
]
