"""CPU Gaussian-splatting tile renderer with exact tile binning and score-based pruning."""

import os

import numba

# TBB in this image is too old for numba; pick the portable pool explicitly.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

from .binning import TileGrid, TileRect, TileSpanList, tiles_accutile, tiles_baseline, tiles_oracle, tiles_snugbox
from .geometry import (
    BBox2D,
    CameraModel,
    Conic2D,
    Gaussian3D,
    ProjectedGaussian,
    Scene,
    baseline_radius,
    opacity_threshold,
    project,
    snug_bbox,
)
from .pipeline import StageTimings, render_full

__all__ = [
    "BBox2D",
    "CameraModel",
    "Conic2D",
    "Gaussian3D",
    "ProjectedGaussian",
    "Scene",
    "StageTimings",
    "TileGrid",
    "TileRect",
    "TileSpanList",
    "baseline_radius",
    "opacity_threshold",
    "project",
    "render_full",
    "snug_bbox",
    "tiles_accutile",
    "tiles_baseline",
    "tiles_oracle",
    "tiles_snugbox",
]
