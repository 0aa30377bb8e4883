"""Hybrid splat feature histograms.

Each voxel representative gets a descriptor built from four blocks:

* ``geometric``: 33 bins, three 11-bin Darboux-angle histograms (FPFH style)
* ``power_spectrum``: per-band SH energy, normalized to sum 1
* ``appearance_hist``: 16-bin histogram of neighbour DC-colour deviations
* ``view``: optional 10-D camera alignment summary

All batched routines operate on padded ``(P, k)`` neighbour tables as
produced by :func:`splatprune.spatial.knn_graph`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFrame, NoCameras
from .splat_io import GaussianSplat, quaternion_to_matrix, normalize_quaternions

N_ANGLE_BINS = 11
GEOMETRIC_DIM = 3 * N_ANGLE_BINS
DEFAULT_APPEARANCE_BINS = 16
VIEW_DIM = 10
MAX_CAMERAS = 32

DEGENERATE_CROSS = 1e-9
SIGN_TIE = 1e-12
POWER_FLOOR = 1e-20


# -- normals --------------------------------------------------------------------

def min_axis_normals(rotations, scale_logs, positions, local_centroids):
    """Thinnest rotated axis of each splat, oriented away from ``local_centroids``.

    Exact scale ties resolve to the last axis.  When the orientation test is
    inconclusive the largest-magnitude component is made positive.
    """
    scale_logs = np.asarray(scale_logs, dtype=np.float64)
    R = quaternion_to_matrix(normalize_quaternions(rotations))
    axis = 2 - np.argmin(scale_logs[:, ::-1], axis=1)
    n = R[np.arange(len(R)), :, axis]
    offset = np.asarray(positions, dtype=np.float64) - np.asarray(local_centroids, dtype=np.float64)
    dot = np.einsum("ij,ij->i", n, offset)
    flip = dot < 0
    tie = np.abs(dot) <= SIGN_TIE
    if np.any(tie):
        dominant = n[np.arange(len(n)), np.argmax(np.abs(n), axis=1)]
        flip = np.where(tie, dominant < 0, flip)
    return np.where(flip[:, None], -n, n)


def splat_normal(splat: GaussianSplat, local_centroid) -> np.ndarray:
    return min_axis_normals(splat.rotation[None], splat.scale_log[None],
                            splat.position[None], np.asarray(local_centroid)[None])[0]


# -- pair features ----------------------------------------------------------------

def darboux_angles(p_s, n_s, p_t, n_t) -> tuple[float, float, float]:
    """(alpha, sigma, theta) with ``n_s`` as the frame's first axis.

    Raises DegenerateFrame for coincident points.  Callers must skip pairs
    where the direction is parallel to ``n_s`` (see :func:`pair_features`).
    """
    p_s, n_s, p_t, n_t = (np.asarray(a, dtype=np.float64) for a in (p_s, n_s, p_t, n_t))
    diff = p_t - p_s
    dist = np.linalg.norm(diff)
    if dist == 0:
        raise DegenerateFrame("coincident points have no connecting direction")
    d = diff / dist
    u = n_s
    v = np.cross(d, u)
    vn = np.linalg.norm(v)
    if vn < DEGENERATE_CROSS:
        raise DegenerateFrame("direction is parallel to the source normal")
    v = v / vn
    w = np.cross(u, v)
    return float(v @ n_t), float(u @ d), float(math.atan2(w @ n_t, u @ n_t))


def pair_features(p1, n1, p2, n2):
    """Batched FPFH pair features with source/target selection.

    The endpoint whose normal makes the smaller angle with the connecting
    line becomes the source.  Returns ``(alpha, sigma, theta, valid)``;
    invalid rows (coincident points or degenerate frame) hold zeros.
    """
    diff = p2 - p1
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    ok = dist > 0
    d = diff / np.where(ok, dist, 1.0)[:, None]
    c1 = np.einsum("ij,ij->i", n1, d)
    c2 = np.einsum("ij,ij->i", n2, d)
    swap = np.arccos(np.clip(np.abs(c1), 0, 1)) > np.arccos(np.clip(np.abs(c2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    nt = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    v = np.cross(d, u)
    vn = np.sqrt(np.einsum("ij,ij->i", v, v))
    ok &= vn >= DEGENERATE_CROSS
    v = v / np.where(ok, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, nt)
    sigma = np.einsum("ij,ij->i", u, d)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))
    zero = np.zeros_like(alpha)
    return (np.where(ok, alpha, zero), np.where(ok, sigma, zero),
            np.where(ok, theta, zero), ok)


def angle_bins(alpha, sigma, theta):
    """Bin indices in 0..10 for each feature (cosines over [-1, 1], theta over (-pi, pi])."""
    top = N_ANGLE_BINS - 1
    a = np.clip(np.floor((np.asarray(alpha) + 1.0) * 0.5 * N_ANGLE_BINS), 0, top)
    s = np.clip(np.floor((np.asarray(sigma) + 1.0) * 0.5 * N_ANGLE_BINS), 0, top)
    t = np.clip(np.floor((np.asarray(theta) + np.pi) / (2 * np.pi) * N_ANGLE_BINS), 0, top)
    return a.astype(np.int64), s.astype(np.int64), t.astype(np.int64)


def _normalize_subhists(h):
    h = h.reshape(len(h), 3, N_ANGLE_BINS)
    total = h.sum(axis=2, keepdims=True)
    return (h / np.where(total > 0, total, 1.0)).reshape(len(h), GEOMETRIC_DIM)


def spfh_all(positions, normals, nbr_idx):
    """SPFH of every point against its neighbour row; returns (hist, empty_flags)."""
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    P, k = nbr_idx.shape
    hist = np.zeros((P, GEOMETRIC_DIM))
    if k == 0:
        return hist, np.ones(P, dtype=bool)
    src = np.repeat(np.arange(P), k)
    dst = nbr_idx.reshape(-1)
    alpha, sigma, theta, ok = pair_features(positions[src], normals[src],
                                            positions[dst], normals[dst])
    a, s, t = angle_bins(alpha, sigma, theta)
    src, a, s, t = src[ok], a[ok], s[ok], t[ok]
    flat = hist.reshape(-1)
    for offset, b in ((0, a), (N_ANGLE_BINS, s), (2 * N_ANGLE_BINS, t)):
        flat += np.bincount(src * GEOMETRIC_DIM + offset + b, minlength=flat.size)
    empty = hist[:, :N_ANGLE_BINS].sum(axis=1) == 0
    return _normalize_subhists(hist), empty


def spfh(positions, normals, i: int, neighbors) -> np.ndarray:
    """Normalized 33-bin SPFH of point ``i`` (all-zero if every pair is degenerate)."""
    nbr = np.asarray([j for j in neighbors], dtype=np.int64).reshape(1, -1)
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    # evaluate only row i: gather the point and its neighbours into a tiny table
    ids = np.concatenate([[i], nbr[0]])
    hist, _ = spfh_all(positions[ids], normals[ids], np.arange(1, len(ids))[None, :])
    return hist[0]


def fpfh_all(spfh_table, nbr_idx, nbr_dist, voxel_size):
    """FPFH_i = SPFH_i + mean_j SPFH_j / max(d_ij, eps), renormalized per sub-histogram."""
    P, k = nbr_idx.shape
    if k == 0:
        return spfh_table.copy()
    eps = 1e-9 * voxel_size
    inv = 1.0 / np.maximum(nbr_dist, eps)
    acc = np.einsum("pk,pkb->pb", inv, spfh_table[nbr_idx]) / k
    return _normalize_subhists(spfh_table + acc)


def fpfh(spfh_table, i: int, neighbors, voxel_size) -> np.ndarray:
    """FPFH of one point from precomputed SPFHs and its (index, distance) list."""
    spfh_table = np.asarray(spfh_table, dtype=np.float64)
    if not neighbors:
        return spfh_table[i].copy()
    idx = np.array([j for j, _ in neighbors], dtype=np.int64)
    dist = np.array([d for _, d in neighbors], dtype=np.float64)
    inv = 1.0 / np.maximum(dist, 1e-9 * voxel_size)
    acc = spfh_table[i] + (inv[:, None] * spfh_table[idx]).sum(axis=0) / len(idx)
    return _normalize_subhists(acc[None])[0]


# -- appearance ---------------------------------------------------------------------

def power_spectra(sh_dc, sh_rest, sh_degree: int, normalize: bool = True):
    """Per-band energy of SH coefficients, summed over the three colour channels.

    ``sh_rest`` is channel-major: the first ``(L+1)^2 - 1`` columns are
    channel 0, and so on.
    """
    sh_dc = np.asarray(sh_dc, dtype=np.float64).reshape(-1, 3)
    sh_rest = np.asarray(sh_rest, dtype=np.float64).reshape(len(sh_dc), -1)
    per_channel = (sh_degree + 1) ** 2 - 1
    P = np.empty((len(sh_dc), sh_degree + 1))
    P[:, 0] = (sh_dc ** 2).sum(axis=1)
    if sh_degree:
        sq = (sh_rest ** 2).reshape(len(sh_dc), 3, per_channel).sum(axis=1)
        for band in range(1, sh_degree + 1):
            P[:, band] = sq[:, band * band - 1:(band + 1) ** 2 - 1].sum(axis=1)
    if not normalize:
        return P
    total = P.sum(axis=1, keepdims=True)
    live = total >= POWER_FLOOR
    return np.where(live, P / np.where(live, total, 1.0), 0.0)


def sh_power_spectrum(splat: GaussianSplat, normalize: bool = True) -> np.ndarray:
    return power_spectra(splat.sh_dc, splat.sh_rest, splat.sh_degree, normalize)[0]


def colour_deviations(colors, nbr_idx):
    """(P, k) distances of each neighbour's colour from its neighbourhood mean."""
    if nbr_idx.shape[1] == 0:
        return np.zeros(nbr_idx.shape)
    c = np.asarray(colors, dtype=np.float64)[nbr_idx]
    return np.sqrt(((c - c.mean(axis=1, keepdims=True)) ** 2).sum(axis=2))


def deviation_scale(deviations) -> float:
    """Scene-level clamp for the appearance histogram (99th percentile)."""
    deviations = np.asarray(deviations).reshape(-1)
    return float(np.percentile(deviations, 99)) if deviations.size else 0.0


def _bin_deviations(dev, d_max, bins):
    if d_max > 0:
        return np.minimum(np.floor(dev / d_max * bins), bins - 1).astype(np.int64)
    return np.zeros(dev.shape, dtype=np.int64)


def appearance_histograms(colors, nbr_idx, bins=DEFAULT_APPEARANCE_BINS, d_max=None):
    dev = colour_deviations(colors, nbr_idx)
    if d_max is None:
        d_max = deviation_scale(dev)
    P, k = dev.shape
    hist = np.zeros((P, bins))
    if k == 0:
        return hist
    b = _bin_deviations(dev, d_max, bins)
    rows = np.repeat(np.arange(P), k)
    hist.reshape(-1)[:] = np.bincount(rows * bins + b.reshape(-1), minlength=P * bins)
    return hist / k


def appearance_histogram(center_color, neighbor_colors, d_max: float,
                         bins: int = DEFAULT_APPEARANCE_BINS) -> np.ndarray:
    """Histogram for one neighbourhood; ``center_color`` only identifies the voxel."""
    del center_color
    neighbor_colors = np.asarray(neighbor_colors, dtype=np.float64).reshape(-1, 3)
    if len(neighbor_colors) == 0:
        return np.zeros(bins)
    idx = np.arange(len(neighbor_colors))[None, :]
    return appearance_histograms(neighbor_colors, idx, bins, d_max)[0]


# -- view features --------------------------------------------------------------------

def view_features_all(positions, normals, centers, forwards, diagonal):
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise NoCameras("view features need at least one camera")
    forwards = np.asarray(forwards, dtype=np.float64).reshape(-1, 3)
    diff = centers[None, :, :] - np.asarray(positions, dtype=np.float64)[:, None, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    view_dir = diff / np.where(dist > 0, dist, 1.0)[:, :, None]
    cos_view = np.abs(np.einsum("pj,pcj->pc", normals, view_dir))
    cos_fwd = np.abs(normals @ forwards.T)
    scale = diagonal if diagonal > 0 else 1.0
    out = np.empty((len(dist), VIEW_DIM))
    for slot, q in enumerate((dist / scale, cos_view, cos_fwd)):
        out[:, 3 * slot] = q.min(axis=1)
        out[:, 3 * slot + 1] = q.mean(axis=1)
        out[:, 3 * slot + 2] = q.max(axis=1)
    out[:, 9] = min(len(centers), MAX_CAMERAS) / MAX_CAMERAS
    return out


def view_features(position, normal, cameras, diagonal: float) -> np.ndarray:
    """10-D summary: [min, mean, max] of distance, |n.view|, |n.forward|, then camera count."""
    if not cameras:
        raise NoCameras("view features need at least one camera")
    centers = [c["center"] for c in cameras]
    forwards = [c["forward"] for c in cameras]
    return view_features_all(np.asarray(position)[None], np.asarray(normal)[None],
                             centers, forwards, diagonal)[0]


# -- assembled descriptors ----------------------------------------------------------------

@dataclass
class HsfhDescriptor:
    geometric: np.ndarray
    power_spectrum: np.ndarray
    appearance_hist: np.ndarray
    view: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        parts = [self.geometric, self.power_spectrum, self.appearance_hist]
        if self.view is not None:
            parts.append(self.view)
        return np.concatenate(parts)


@dataclass
class DescriptorTable:
    """Per-voxel descriptors as stacked arrays."""

    geometric: np.ndarray        # (V, 33)
    power_spectrum: np.ndarray   # (V, L+1)
    appearance_hist: np.ndarray  # (V, bins)
    normals: np.ndarray          # (V, 3)
    empty: np.ndarray            # (V,) geometric block had no usable pairs
    view: np.ndarray | None = None

    def __len__(self):
        return len(self.geometric)

    def __getitem__(self, j) -> HsfhDescriptor:
        return HsfhDescriptor(self.geometric[j], self.power_spectrum[j], self.appearance_hist[j],
                              None if self.view is None else self.view[j])

    def full(self) -> np.ndarray:
        parts = [self.geometric, self.power_spectrum, self.appearance_hist]
        if self.view is not None:
            parts.append(self.view)
        return np.concatenate(parts, axis=1)


def dominant_members(mapping, opacity) -> np.ndarray:
    """Per voxel, the member splat with maximal opacity (lowest index on ties)."""
    ids = np.arange(len(opacity))
    order = np.lexsort((ids, -np.asarray(opacity), mapping.splat_to_voxel))
    return order[mapping.offsets[:-1]]


def voxel_normals(scene, mapping, nbr_idx) -> np.ndarray:
    lead = dominant_members(mapping, scene.opacity)
    centroids = mapping.centroid
    local = centroids[nbr_idx].mean(axis=1) if nbr_idx.shape[1] else centroids
    return min_axis_normals(scene.rotations[lead], scene.scale_log[lead], centroids, local)


def compute_descriptors(scene, mapping, nbr_idx, nbr_dist, *, appearance_bins=DEFAULT_APPEARANCE_BINS,
                        cameras=None, diagonal=1.0) -> DescriptorTable:
    normals = voxel_normals(scene, mapping, nbr_idx)
    spfh_table, empty = spfh_all(mapping.centroid, normals, nbr_idx)
    geometric = fpfh_all(spfh_table, nbr_idx, nbr_dist, mapping.voxel_size)
    appearance = appearance_histograms(mapping.mean_sh_dc, nbr_idx, appearance_bins)
    view = None
    if cameras:
        view = view_features_all(mapping.centroid, normals,
                                 [c["center"] for c in cameras], [c["forward"] for c in cameras],
                                 diagonal)
    return DescriptorTable(geometric, mapping.mean_power_spectrum, appearance, normals, empty, view)


__all__ = [
    "HsfhDescriptor", "DescriptorTable", "min_axis_normals", "splat_normal", "darboux_angles",
    "pair_features", "angle_bins", "spfh", "spfh_all", "fpfh", "fpfh_all", "power_spectra",
    "sh_power_spectrum", "appearance_histogram", "appearance_histograms", "colour_deviations",
    "deviation_scale", "view_features", "view_features_all", "compute_descriptors",
    "voxel_normals", "dominant_members",
]
