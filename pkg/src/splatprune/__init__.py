"""Camera-agnostic one-shot pruning of 3D Gaussian Splatting assets."""

from .errors import SplatPruneError
from .evidence import (EvidenceState, LocalStats, accumulate_evidence, beta_inv_cdf, beta_mean,
                       beta_variance, local_statistics, reg_inc_beta, score_splats)
from .hsfh import HsfhDescriptor, compute_descriptors
from .pruning import PruneConfig, PruneResult, prune, run_pipeline, select_threshold
from .report import chamfer, emit_report, synth_scene
from .spatial import BoundingBox, VoxelMapping, bbox, interpolate_to_splats, knn, voxel_downsample
from .splat_io import GaussianSplat, SplatScene, covariance, load_ply, opacity_linear, save_ply

__version__ = "0.1.0"

__all__ = [
    "SplatPruneError", "EvidenceState", "LocalStats", "accumulate_evidence", "beta_inv_cdf",
    "beta_mean", "beta_variance", "local_statistics", "reg_inc_beta", "score_splats",
    "HsfhDescriptor", "compute_descriptors", "PruneConfig", "PruneResult", "prune", "run_pipeline",
    "select_threshold", "chamfer", "emit_report", "synth_scene", "BoundingBox", "VoxelMapping",
    "bbox", "interpolate_to_splats", "knn", "voxel_downsample", "GaussianSplat", "SplatScene",
    "covariance", "load_ply", "opacity_linear", "save_ply",
]
