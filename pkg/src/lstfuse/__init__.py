"""Uncertainty-guided test-time adaptation for coarse-to-fine LST fusion."""

from .grid import (
    Grid,
    IndexStack,
    block_aggregate,
    extract_patches,
    normalized_difference,
    read_grid,
    upsample_replicate,
    write_grid,
)
from .rng import RngKey
from .autodiff import Tape, Tensor, constant
from .model import EfdModel, init_model, partition_parameters, read_checkpoint, write_checkpoint
from .losses import LossBreakdown, LossWeights, bias_loss, lulc_loss, tta_loss, uncertainty_loss
from .adapt import AdaptReport, AdaptSample, TtaConfig, adapt, adam_step, schedule
from .scenario import TargetSample, World, WorldSpec, default_world, generate_world, pretrain
from .evalreport import MetricRow, compare, evaluate, mae, predict_scene, rmse

__version__ = "0.1.0"

__all__ = [
    "Grid", "IndexStack", "block_aggregate", "extract_patches",
    "normalized_difference", "read_grid", "upsample_replicate", "write_grid",
    "RngKey", "Tape", "Tensor", "constant",
    "EfdModel", "init_model", "partition_parameters", "read_checkpoint", "write_checkpoint",
    "LossBreakdown", "LossWeights", "bias_loss", "lulc_loss", "tta_loss", "uncertainty_loss",
    "AdaptReport", "AdaptSample", "TtaConfig", "adapt", "adam_step", "schedule",
    "TargetSample", "World", "WorldSpec", "default_world", "generate_world", "pretrain",
    "MetricRow", "compare", "evaluate", "mae", "predict_scene", "rmse",
    "__version__",
]
