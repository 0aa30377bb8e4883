"""Threshold selection, one-shot pruning and the end-to-end pipeline."""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np

from . import evidence as ev
from .errors import ConfigError, RatioOutOfRange, WouldRemoveAll
from .evidence import LocalStats, accumulate, local_statistics, pruning_statistic, score_splats
from .hsfh import DEFAULT_APPEARANCE_BINS, compute_descriptors
from .spatial import (DEFAULT_INTERP_M, DEFAULT_K_NEIGHBORS, DEFAULT_VOXEL_FRAC, bbox_of,
                      interpolate_to_splats, kernel_scale, knn_graph, voxel_downsample)

ABLATIONS = ("full", "no_beta", "no_desc", "none")
_CHUNK = 1 << 17


@dataclass
class PruneConfig:
    target_ratio: float | None = None
    tau: float | None = None
    ablation: str = "full"
    voxel_frac: float = DEFAULT_VOXEL_FRAC
    k_neighbors: int = DEFAULT_K_NEIGHBORS
    interp_m: int = DEFAULT_INTERP_M
    appearance_bins: int = DEFAULT_APPEARANCE_BINS
    gamma: float = ev.DEFAULT_GAMMA
    score_mode: str = "optimistic"
    score_basis: str = "retention"
    z: float = ev.DEFAULT_Z
    q: float = ev.DEFAULT_Q
    prior_a: float = ev.DEFAULT_PRIOR[0]
    prior_b: float = ev.DEFAULT_PRIOR[1]
    with_view_features: bool = False
    normal_source: str = "min_axis"
    stat_mode: str = "neighborhood"
    workers: int = 1

    def __post_init__(self):
        if (self.target_ratio is None) == (self.tau is None):
            raise ConfigError("exactly one of target_ratio and tau must be set")
        if self.target_ratio is not None and not 0 < self.target_ratio < 1:
            raise RatioOutOfRange(f"target ratio must lie in (0, 1), got {self.target_ratio}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.score_mode not in ev.SCORE_MODES:
            raise ConfigError(f"unknown score mode {self.score_mode!r}")
        if self.score_basis not in ev.SCORE_BASES:
            raise ConfigError(f"unknown score basis {self.score_basis!r}")
        if self.stat_mode not in ev.STAT_MODES:
            raise ConfigError(f"unknown statistic mode {self.stat_mode!r}")
        if self.normal_source != "min_axis":
            raise ConfigError(f"unsupported normal source {self.normal_source!r}")
        if self.k_neighbors < 1 or self.interp_m < 1 or self.appearance_bins < 1:
            raise ConfigError("k_neighbors, interp_m and appearance_bins must be positive")
        if self.gamma < 0 or self.z < 0:
            raise ConfigError("gamma and z must be non-negative")
        if not 0 < self.q < 1:
            raise ConfigError("q must lie in (0, 1)")
        if self.prior_a <= 0 or self.prior_b <= 0:
            raise ConfigError("Beta prior parameters must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @property
    def prior(self):
        return (self.prior_a, self.prior_b)


@dataclass
class PruneResult:
    kept_ids: np.ndarray
    removed_ids: np.ndarray
    tau_effective: float
    scores: np.ndarray

    @property
    def ratio_achieved(self) -> float:
        return len(self.removed_ids) / (len(self.kept_ids) + len(self.removed_ids))


# -- thresholding ------------------------------------------------------------------------

def removal_count(ratio: float, n: int) -> int:
    """round(ratio * n), halves rounded up."""
    return int(math.floor(ratio * n + 0.5))


def removal_order(scores) -> np.ndarray:
    """Indices sorted by (score, index) ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), scores))


def select_threshold(scores, ratio: float) -> tuple[float, int]:
    """Percentile threshold removing ``round(ratio * N)`` lowest-scoring entries.

    Returns ``(tau, removed_count)`` where ``tau`` is the first survivor's score.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 < ratio < 1:
        raise RatioOutOfRange(f"ratio must lie in (0, 1), got {ratio}")
    n = len(scores)
    if n < 2:
        raise RatioOutOfRange("thresholding needs at least two scores")
    k = removal_count(ratio, n)
    order = removal_order(scores)
    tau = float(scores[order[k]]) if k < n else math.inf
    return tau, k


def _result(keep_mask, tau, scores) -> PruneResult:
    if not keep_mask.any():
        raise WouldRemoveAll("threshold removes every splat")
    return PruneResult(np.flatnonzero(keep_mask), np.flatnonzero(~keep_mask), float(tau),
                       np.asarray(scores, dtype=np.float64))


def prune(scene, scores, tau: float) -> PruneResult:
    """Remove every splat with ``score < tau``."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(scene):
        raise ConfigError(f"{len(scores)} scores for {len(scene)} splats")
    return _result(scores >= tau, tau, scores)


def prune_ratio(scene, scores, ratio: float) -> PruneResult:
    """Remove exactly ``round(ratio * N)`` splats, lowest (score, index) first."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(scene):
        raise ConfigError(f"{len(scores)} scores for {len(scene)} splats")
    tau, k = select_threshold(scores, ratio)
    keep = np.ones(len(scores), dtype=bool)
    keep[removal_order(scores)[:k]] = False
    return _result(keep, tau, scores)


# -- pipeline ----------------------------------------------------------------------------

@dataclass
class ScoringState:
    """Everything computed before thresholding; reusable across ratios."""

    scores: np.ndarray
    rank_scores: np.ndarray   # ascending = prune first
    splat_stats: LocalStats
    voxel_stats: LocalStats
    mapping: object
    nbr_idx: np.ndarray
    nbr_dist: np.ndarray
    descriptors: object | None
    voxel_evidence: ev.EvidenceState | None
    splat_evidence: ev.EvidenceState | None
    bandwidth: float
    timings: dict = field(default_factory=dict)


@dataclass
class PipelineRun:
    result: PruneResult
    pruned: object
    state: ScoringState

    @property
    def timings(self):
        return self.state.timings


@contextmanager
def _timed(timings, stage):
    start = time.perf_counter()
    yield
    timings[stage] = (time.perf_counter() - start) * 1000.0


def _splat_evidence(positions, splat_stats, voxel_stats, mapping, nbr_idx, bandwidth, prior):
    """Evidence per splat: the splat itself (weight 1) plus its voxel's neighbours."""
    n = len(positions)
    A = np.empty(n)
    B = np.empty(n)
    vox_s, vox_l, vox_o = voxel_stats.s, voxel_stats.l, voxel_stats.o
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        nbr = nbr_idx[mapping.splat_to_voxel[sl]]
        diff = mapping.centroid[nbr] - positions[sl, None, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        state = accumulate(
            splat_stats.u[sl],
            np.column_stack([splat_stats.s[sl], vox_s[nbr]]),
            np.column_stack([splat_stats.l[sl], vox_l[nbr]]),
            np.column_stack([splat_stats.o[sl], vox_o[nbr]]),
            np.column_stack([np.zeros(sl.stop - sl.start), dist]),
            bandwidth, prior)
        A[sl], B[sl] = state.A, state.B
    return ev.EvidenceState(A, B)


def voxel_evidence(voxel_stats, nbr_idx, nbr_dist, bandwidth, prior):
    """Evidence per voxel: the voxel itself (weight 1) plus its k neighbours."""
    idx = np.column_stack([np.arange(len(nbr_idx)), nbr_idx])
    dist = np.column_stack([np.zeros(len(nbr_idx)), nbr_dist])
    return ev.accumulate_evidence(voxel_stats, (idx, dist), bandwidth, prior)


def score_scene(scene, config: PruneConfig, cameras=None) -> ScoringState:
    """All stages up to and including scoring; never looks at the threshold."""
    timings: dict = {}
    positions = scene.positions
    opacity = scene.opacity
    with _timed(timings, "voxelize"):
        mapping = voxel_downsample(scene, config.voxel_frac, config.interp_m, workers=config.workers)
    k = min(config.k_neighbors, mapping.n_voxels - 1)
    with _timed(timings, "neighbors"):
        if k > 0:
            nbr_idx, nbr_dist = knn_graph(mapping.centroid, k, workers=config.workers)
        else:
            nbr_idx = np.zeros((mapping.n_voxels, 0), dtype=np.int64)
            nbr_dist = np.zeros((mapping.n_voxels, 0))
    bandwidth = kernel_scale(positions, config.voxel_frac)

    descriptors = None
    use_desc = config.ablation in ("full", "no_beta")
    use_cameras = bool(cameras) and config.with_view_features
    with _timed(timings, "descriptors"):
        if use_desc or use_cameras:
            descriptors = compute_descriptors(
                scene, mapping, nbr_idx, nbr_dist, appearance_bins=config.appearance_bins,
                cameras=cameras if use_cameras else None, diagonal=bbox_of(positions).diagonal)
    with _timed(timings, "statistics"):
        if use_desc:
            voxel_stats = local_statistics(descriptors, mapping.mean_opacity, nbr_idx, config.stat_mode)
        else:
            voxel_stats = LocalStats.neutral(mapping.mean_opacity)
    with _timed(timings, "interpolate"):
        splat_stats = voxel_stats.interpolate(mapping, opacity=opacity)

    v_evidence = s_evidence = None
    with _timed(timings, "evidence"):
        if config.ablation in ("full", "no_desc"):
            v_evidence = voxel_evidence(voxel_stats, nbr_idx, nbr_dist, bandwidth, config.prior)
            s_evidence = _splat_evidence(positions, splat_stats, voxel_stats, mapping, nbr_idx,
                                         bandwidth, config.prior)
            if use_cameras:
                e = interpolate_to_splats(ev.grazing_proxy(descriptors.view, mapping.mean_opacity), mapping)
                s_evidence.A = s_evidence.A + ev.GRAZING_WEIGHT * e
    with _timed(timings, "score"):
        if s_evidence is not None:
            scores = score_splats(s_evidence, config.score_mode, config.gamma, config.z, config.q,
                                  config.score_basis).score
        else:
            keep_conf = 1.0 - ev.minmax(pruning_statistic(splat_stats))
            scores = keep_conf if config.score_basis == "retention" else 1.0 - keep_conf
    rank = scores if config.score_basis == "retention" else -scores
    return ScoringState(np.asarray(scores, dtype=np.float64), np.asarray(rank, dtype=np.float64),
                        splat_stats, voxel_stats, mapping, nbr_idx, nbr_dist, descriptors,
                        v_evidence, s_evidence, bandwidth, timings)


def threshold(scene, state: ScoringState, *, ratio=None, tau=None, basis="retention") -> PruneResult:
    """Apply a ratio or a raw threshold to precomputed scores."""
    if ratio is not None:
        result = prune_ratio(scene, state.rank_scores, ratio)
    else:
        # the pruning basis removes high scores: negate into the rank space
        result = prune(scene, state.rank_scores, tau if basis == "retention" else -tau)
    if basis != "retention":
        result.tau_effective = -result.tau_effective
    result.scores = state.scores
    return result


def run_pipeline(scene, config: PruneConfig, cameras=None) -> PipelineRun:
    state = score_scene(scene, config, cameras)
    with _timed(state.timings, "threshold"):
        result = threshold(scene, state, ratio=config.target_ratio, tau=config.tau,
                           basis=config.score_basis)
        pruned = scene.subset(result.kept_ids)
    return PipelineRun(result, pruned, state)


__all__ = [
    "PruneConfig", "PruneResult", "ScoringState", "PipelineRun", "ABLATIONS",
    "select_threshold", "prune", "prune_ratio", "removal_count", "removal_order",
    "score_scene", "threshold", "run_pipeline", "voxel_evidence",
]
