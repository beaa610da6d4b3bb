"""Inverse rendering of 2D Gaussian surfels with basis BRDFs from flash photography."""

from .scene import (
    BasisSet,
    Camera,
    GaussianCloud,
    PointLight,
    View,
    gaussian_normal,
    load_checkpoint,
    look_at_camera,
    resize_weight_vectors,
    save_checkpoint,
    temperature_softmax,
)
from .render import RasterConfig, RenderOutput, render_view
from .reference import brute_force_render
from .losses import LossConfig, total_loss
from .grad import GradientStore, backward, check_gradients, random_scene
from .control import ControlConfig, control_tick, kmeans_init
from .optim import Adam, TrainConfig
from .train import train
from .metrics import evaluate, normal_mae, psnr

__all__ = [
    "Adam",
    "BasisSet",
    "Camera",
    "ControlConfig",
    "GaussianCloud",
    "GradientStore",
    "LossConfig",
    "PointLight",
    "RasterConfig",
    "RenderOutput",
    "TrainConfig",
    "View",
    "backward",
    "brute_force_render",
    "check_gradients",
    "control_tick",
    "evaluate",
    "gaussian_normal",
    "kmeans_init",
    "load_checkpoint",
    "look_at_camera",
    "normal_mae",
    "psnr",
    "random_scene",
    "render_view",
    "resize_weight_vectors",
    "save_checkpoint",
    "temperature_softmax",
    "total_loss",
    "train",
]

__version__ = "0.1.0"
