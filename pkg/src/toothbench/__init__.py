"""Volumetric tooth segmentation benchmark: metrics, loss, preprocessing,
synthetic phantoms and a toy-scale attention U-Net forward pass."""

from .loss import LossConfig, LossValue, elementwise_dsc, loss_gradient, weighted_dice_loss
from .metrics import (
    CaseReport,
    EvalConfig,
    UndefinedMetricError,
    assd,
    evaluate_case,
    hausdorff,
    overlap_metrics,
    point_to_set_distances,
    surface_dice,
    surface_overlap,
)
from .phantom import PhantomSpec, generate_phantom, perturb_prediction
from .volume import Spacing, SurfacePointSet, Volume, confusion_counts, extract_surface, threshold_prob

__version__ = "0.1.0"
