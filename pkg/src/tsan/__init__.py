"""Restoration of transcoded video with temporal alignment and auxiliary supervision."""
from .checkpoint import load_checkpoint, save_checkpoint
from .flow import FlowEstimator, align_window, estimate_flow
from .harness import TrainConfig, ablate_loss_weights, ablate_variants, enhance, evaluate, train
from .losses import LossConfig, loss_auxiliary, loss_global, loss_total
from .metrics import psnr, ssim
from .model import ClipSample, ModelConfig, ModelParams, forward, init_params, zero_params

__version__ = "0.1.0"

__all__ = [
    "ClipSample", "FlowEstimator", "LossConfig", "ModelConfig", "ModelParams", "TrainConfig",
    "ablate_loss_weights", "ablate_variants", "align_window", "enhance", "estimate_flow", "evaluate",
    "forward", "init_params", "load_checkpoint", "loss_auxiliary", "loss_global", "loss_total",
    "psnr", "save_checkpoint", "ssim", "train", "zero_params",
]
