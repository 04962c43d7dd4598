"""Procedural data, augmentations, training loop and evaluation."""

from .config import ConfigError, TrainConfig, load_config, parse_config
from .data import SceneSample, camera_jitter, generate_scene, grid_distortion, make_sample
from .metrics import psnr, ssim
from .train import TrainingAborted, TrainResult, evaluate, reconstruct, train

__all__ = [
    "ConfigError", "SceneSample", "TrainConfig", "TrainResult", "TrainingAborted", "camera_jitter", "evaluate",
    "generate_scene", "grid_distortion", "load_config", "make_sample", "parse_config", "psnr", "reconstruct",
    "ssim", "train",
]
