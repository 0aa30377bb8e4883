"""Scene-scale geometry: bounding box, voxel grid, kNN, voxel->splat interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyScene, InvalidFraction, KTooLarge, LengthMismatch
from .hsfh import power_spectra

DEFAULT_VOXEL_FRAC = 0.015
DEFAULT_K_NEIGHBORS = 16
DEFAULT_INTERP_M = 4


@dataclass(frozen=True)
class BoundingBox:
    min: np.ndarray
    max: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))


def bbox(scene) -> BoundingBox:
    return bbox_of(scene.positions)


def bbox_of(points) -> BoundingBox:
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise EmptyScene("bounding box of an empty point set")
    return BoundingBox(points.min(axis=0), points.max(axis=0))


def voxel_size_for(box: BoundingBox, voxel_frac: float) -> float:
    diag = box.diagonal
    # degenerate box (single splat, or all coincident): one scene unit
    return voxel_frac * diag if diag > 0 else 1.0


def kernel_scale(points, voxel_frac: float) -> float:
    """Rotation-invariant counterpart of the voxel size.

    Uses the diameter of the centroid-centred bounding sphere instead of the
    axis-aligned diagonal; the two agree for box-filling scenes, but only
    this one survives a global rotation unchanged.
    """
    points = np.asarray(points, dtype=np.float64)
    centre = points.mean(axis=0)
    diameter = 2.0 * float(np.sqrt(((points - centre) ** 2).sum(axis=1).max()))
    return voxel_frac * diameter if diameter > 0 else 1.0


@dataclass
class VoxelMapping:
    """Voxel representatives plus splat<->voxel bookkeeping.

    Members are stored CSR-style: ``order[offsets[j]:offsets[j+1]]`` are the
    splat ids of voxel ``j`` in ascending order.  Interpolation pairs are the
    dense ``(N, m)`` arrays ``interp_index`` / ``interp_weight``.
    """

    voxel_size: float
    origin: np.ndarray
    cells: np.ndarray            # (V, 3) integer grid coordinates
    centroid: np.ndarray         # (V, 3)
    mean_opacity: np.ndarray     # (V,)
    mean_sh_dc: np.ndarray       # (V, 3)
    mean_power_spectrum: np.ndarray  # (V, L+1)
    member_count: np.ndarray     # (V,)
    order: np.ndarray
    offsets: np.ndarray
    splat_to_voxel: np.ndarray   # (N,)
    interp_index: np.ndarray     # (N, m)
    interp_weight: np.ndarray    # (N, m)

    @property
    def n_voxels(self) -> int:
        return len(self.centroid)

    def member_ids(self, j: int) -> np.ndarray:
        return self.order[self.offsets[j]:self.offsets[j + 1]]

    @property
    def representatives(self) -> list[dict]:
        return [
            {
                "centroid": self.centroid[j],
                "mean_opacity": float(self.mean_opacity[j]),
                "mean_sh_dc": self.mean_sh_dc[j],
                "mean_power_spectrum": self.mean_power_spectrum[j],
                "member_count": int(self.member_count[j]),
                "member_ids": self.member_ids(j),
            }
            for j in range(self.n_voxels)
        ]

    @property
    def interp(self) -> list[list[tuple[int, float]]]:
        return [list(zip(map(int, idx), map(float, w)))
                for idx, w in zip(self.interp_index, self.interp_weight)]


def _group_mean(values, inverse, counts):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        return np.bincount(inverse, weights=values, minlength=len(counts)) / counts
    out = np.empty((len(counts), values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(inverse, weights=values[:, c], minlength=len(counts))
    return out / counts[:, None]


def voxel_downsample(scene, voxel_frac: float = DEFAULT_VOXEL_FRAC,
                     interp_m: int = DEFAULT_INTERP_M, workers: int = 1) -> VoxelMapping:
    if not 0 < voxel_frac <= 0.1:
        raise InvalidFraction(f"voxel_frac must lie in (0, 0.1], got {voxel_frac}")
    positions = scene.positions
    box = bbox_of(positions)
    size = voxel_size_for(box, voxel_frac)
    cells_all = np.floor((positions - box.min) / size).astype(np.int64)
    # lexicographic (ix, iy, iz) order keeps voxel ids translation-reproducible
    cells, inverse, counts = np.unique(cells_all, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    countsf = counts.astype(np.float64)
    order = np.argsort(inverse, kind="stable")
    offsets = np.concatenate([[0], np.cumsum(counts)])

    centroid = _group_mean(positions, inverse, countsf)
    mapping = VoxelMapping(
        voxel_size=size,
        origin=box.min,
        cells=cells,
        centroid=centroid,
        mean_opacity=_group_mean(scene.opacity, inverse, countsf),
        mean_sh_dc=_group_mean(scene.sh_dc, inverse, countsf),
        mean_power_spectrum=_group_mean(power_spectra(scene.sh_dc, scene.sh_rest, scene.sh_degree),
                                        inverse, countsf),
        member_count=counts,
        order=order,
        offsets=offsets,
        splat_to_voxel=inverse,
        interp_index=np.zeros((len(positions), 0), dtype=np.int64),
        interp_weight=np.zeros((len(positions), 0)),
    )
    mapping.interp_index, mapping.interp_weight = interpolation_weights(
        positions, centroid, size, interp_m, workers=workers)
    return mapping


def interpolation_weights(points, centroids, voxel_size, m=DEFAULT_INTERP_M, workers=1):
    """Inverse-distance weights over the ``m`` nearest voxel representatives."""
    m = min(m, len(centroids))
    tree = cKDTree(centroids)
    dist, idx = tree.query(points, k=m, workers=workers)
    dist = np.asarray(dist, dtype=np.float64).reshape(len(points), m)
    idx = np.asarray(idx, dtype=np.int64).reshape(len(points), m)
    w = 1.0 / (dist + 1e-9 * voxel_size)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def interpolate_to_splats(voxel_values, mapping: VoxelMapping) -> np.ndarray:
    voxel_values = np.asarray(voxel_values, dtype=np.float64)
    if len(voxel_values) != mapping.n_voxels:
        raise LengthMismatch(f"{len(voxel_values)} voxel values for {mapping.n_voxels} voxels")
    gathered = voxel_values[mapping.interp_index]
    if voxel_values.ndim == 1:
        return (gathered * mapping.interp_weight).sum(axis=1)
    return np.einsum("nm,nm...->n...", mapping.interp_weight, gathered)


# -- nearest neighbours -----------------------------------------------------------

def knn(points, query, k: int, exclude: int | None = None) -> list[tuple[int, float]]:
    """Exact k nearest neighbours of ``query``, ascending by (distance, index).

    ``exclude`` drops one point by index (self-exclusion when the query is
    one of the points).
    """
    points = np.asarray(points, dtype=np.float64)
    available = len(points) - (exclude is not None)
    if k < 1 or k > available:
        raise KTooLarge(f"k={k} but only {available} candidate points")
    d = np.sqrt(((points - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    idx = np.arange(len(points))
    if exclude is not None:
        keep = idx != exclude
        d, idx = d[keep], idx[keep]
    sel = np.lexsort((idx, d))[:k]
    return [(int(idx[s]), float(d[s])) for s in sel]


def knn_graph(points, k: int, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """(index, distance) arrays of shape (P, k) for every point, self excluded.

    Rows are ordered by (distance, index).  Rows whose k-th distance is tied
    with the next candidate are recomputed exactly so the lower index wins.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k < 1 or k > n - 1:
        raise KTooLarge(f"k={k} but only {n - 1} other points")
    tree = cKDTree(points)
    kq = min(k + 2, n)
    dist, idx = tree.query(points, k=kq, workers=workers)
    dist = dist.reshape(n, kq)
    idx = idx.reshape(n, kq)
    # drop the self hit, then order each row by (distance, index)
    big = np.iinfo(np.int64).max
    not_self = idx != np.arange(n)[:, None]
    cand_i = np.where(not_self, idx, big)
    cand_d = np.where(not_self, dist, np.inf)
    order = np.lexsort((cand_i, cand_d), axis=-1)
    cand_i = np.take_along_axis(cand_i, order, axis=1)
    cand_d = np.take_along_axis(cand_d, order, axis=1)
    out_i = np.ascontiguousarray(cand_i[:, :k])
    out_d = np.ascontiguousarray(cand_d[:, :k])
    # the tree's tie order is arbitrary: a row is only trusted when the next
    # candidate is strictly farther than the k-th
    suspicious = cand_d[:, k] <= out_d[:, -1] if kq > k else np.zeros(n, dtype=bool)
    for row in np.flatnonzero(suspicious):
        cand = tree.query_ball_point(points[row], out_d[row, -1] * (1 + 1e-12) + 1e-300)
        cand = np.array(sorted(c for c in cand if c != row), dtype=np.int64)
        d = np.sqrt(((points[cand] - points[row]) ** 2).sum(axis=1))
        sel = np.lexsort((cand, d))[:k]
        out_i[row], out_d[row] = cand[sel], d[sel]
    return out_i, out_d


__all__ = [
    "BoundingBox", "VoxelMapping", "bbox", "bbox_of", "voxel_downsample",
    "interpolate_to_splats", "interpolation_weights", "knn", "knn_graph",
    "kernel_scale", "voxel_size_for",
    "DEFAULT_VOXEL_FRAC", "DEFAULT_K_NEIGHBORS", "DEFAULT_INTERP_M",
]
