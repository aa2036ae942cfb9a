"""Evaluation metrics: image quality, SDE, semantic loss and attention probes."""

from eimlab.metrics.quality import masked_background_metrics, psnr, ssim
from eimlab.metrics.sde import SDEReport, scene_sde, sde_metric
from eimlab.metrics.semantic import SemanticLossRow, semantic_loss_oracle, semantic_loss_sweep

__all__ = [
    "SDEReport",
    "SemanticLossRow",
    "masked_background_metrics",
    "psnr",
    "scene_sde",
    "sde_metric",
    "semantic_loss_oracle",
    "semantic_loss_sweep",
    "ssim",
]
