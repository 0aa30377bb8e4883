"""Run reports, a camera-free quality proxy, and the planted-redundancy test scene."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, EmptySpec
from .splat_io import SplatScene

HIST_BINS = 64
FLOAT_DIGITS = 9
REDUNDANT = "REDUNDANT"
FINE = "FINE"


def chamfer(a, b, workers: int = 1) -> float:
    """Symmetric chamfer distance: mean of both directed mean-nearest distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("chamfer distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a, k=1, workers=workers)
    d_ba, _ = cKDTree(a).query(b, k=1, workers=workers)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def score_histogram(scores, bins: int = HIST_BINS) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    counts, _ = np.histogram(scores, bins=bins, range=(lo, hi) if hi > lo else (lo, lo + 1.0))
    return {"min": lo, "max": hi, "counts": [int(c) for c in counts]}


def _round_floats(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.{FLOAT_DIGITS}g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round_floats(obj.item())
    return obj


def to_json(doc) -> str:
    """Fixed-order JSON with floats cut to 9 significant digits."""
    return json.dumps(_round_floats(doc), indent=2, allow_nan=False) + "\n"


def build_report(result, scene, pruned, config, stats_summary=None, timings=None,
                 workers: int = 1) -> dict:
    n = len(scene)
    removed = len(result.removed_ids)
    return {
        "input_count": n,
        "output_count": n - removed,
        "ratio_achieved": removed / n,
        "tau_effective": float(result.tau_effective),
        "gamma": float(config.gamma),
        "ablation": config.ablation,
        "voxel_frac": float(config.voxel_frac),
        "k_neighbors": int(config.k_neighbors),
        "score_mode": config.score_mode,
        "score_basis": config.score_basis,
        "score_histogram": score_histogram(result.scores),
        "stats_summary": stats_summary or {},
        "chamfer_to_original": chamfer(scene.positions, pruned.positions, workers=workers),
        "timing_ms": None if timings is None else {k: float(v) for k, v in timings.items()},
    }


def emit_report(result, scene, pruned, config, stats_summary=None, timings=None, workers: int = 1) -> str:
    return to_json(build_report(result, scene, pruned, config, stats_summary, timings, workers))


# -- synthetic scenes --------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_plane: int
    n_rod: int
    noise: float = 0.0
    seed: int = 0


def _frame_quaternions(tangents):
    """Quaternions whose local x axis follows ``tangents`` and whose z axis leans upward."""
    x = tangents / np.linalg.norm(tangents, axis=1, keepdims=True)
    up = np.array([0.0, 0.0, 1.0])
    y = np.cross(up, x)
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    z = np.cross(x, y)
    R = np.stack([x, y, z], axis=2)
    return matrices_to_quaternions(R)


def matrices_to_quaternions(R):
    """wxyz quaternions for (N, 3, 3) rotation matrices (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    case = np.where(tr > diag.max(axis=1), 3, np.argmax(diag, axis=1))
    q = np.empty((len(R), 4))
    for c in range(4):
        m = case == c
        if not m.any():
            continue
        r = R[m]
        if c == 3:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                             (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], axis=1)
        else:
            i, j, k = c, (c + 1) % 3, (c + 2) % 3
            s = 2.0 * np.sqrt(1.0 + r[:, i, i] - r[:, j, j] - r[:, k, k])
            vec = np.empty((m.sum(), 3))
            vec[:, i] = 0.25 * s
            vec[:, j] = (r[:, j, i] + r[:, i, j]) / s
            vec[:, k] = (r[:, k, i] + r[:, i, k]) / s
            w = (r[:, k, j] - r[:, j, k]) / s
            q[m] = np.column_stack([w, vec])
    return q


def synth_scene(spec: SynthSpec | dict) -> tuple[SplatScene, list[str]]:
    """Flat redundant square plus a thin varied curve above it.

    Plane splats come first, then the curve; labels follow the same order.
    """
    if isinstance(spec, dict):
        spec = SynthSpec(**spec)
    if spec.n_plane < 0 or spec.n_rod < 0 or spec.n_plane + spec.n_rod == 0:
        raise EmptySpec("synth scene needs a positive number of splats")
    rng = np.random.default_rng(spec.seed)
    parts = []

    if spec.n_plane:
        side = math.ceil(math.sqrt(spec.n_plane))
        spacing = 1.0 / side
        cell = np.arange(spec.n_plane)
        pos = np.column_stack([(cell % side + 0.5) * spacing, (cell // side + 0.5) * spacing,
                               np.zeros(spec.n_plane)])
        yaw = rng.uniform(0.0, np.pi, spec.n_plane)
        rot = np.column_stack([np.cos(yaw / 2), np.zeros(spec.n_plane), np.zeros(spec.n_plane),
                               np.sin(yaw / 2)])
        scales = np.tile([math.log(0.6 * spacing), math.log(0.6 * spacing), math.log(0.05 * spacing)],
                         (spec.n_plane, 1))
        colour = np.tile([0.4, 0.4, 0.4], (spec.n_plane, 1))
        parts.append((pos, scales, rot, np.full(spec.n_plane, 2.0), colour))

    if spec.n_rod:
        t = (np.arange(spec.n_rod) + 0.5) / spec.n_rod
        pos = np.column_stack([0.1 + 0.8 * t, 0.5 + 0.3 * np.sin(2 * np.pi * t),
                               0.15 + 0.1 * np.sin(np.pi * t)])
        tangent = np.column_stack([np.full_like(t, 0.8), 0.6 * np.pi * np.cos(2 * np.pi * t),
                                   0.1 * np.pi * np.cos(np.pi * t)])
        rot = _frame_quaternions(tangent)
        step = float(np.linalg.norm(tangent, axis=1).mean()) / spec.n_rod
        scales = np.tile([math.log(0.6 * step), math.log(0.003), math.log(0.0015)], (spec.n_rod, 1))
        colour = rng.uniform(-1.0, 1.0, size=(spec.n_rod, 3))
        opacity = np.where(np.arange(spec.n_rod) % 2 == 0, -1.0, 2.0)
        parts.append((pos, scales, rot, opacity, colour))

    pos, scales, rot, opacity, colour = (np.concatenate(cols) for cols in zip(*parts))
    if spec.noise:
        pos = pos + rng.normal(0.0, spec.noise, size=pos.shape)
    scene = SplatScene.from_arrays(pos, scales, rot, opacity, colour)
    labels = [REDUNDANT] * spec.n_plane + [FINE] * spec.n_rod
    return scene, labels


def labels_json(labels) -> str:
    return json.dumps([{"index": i, "label": lab} for i, lab in enumerate(labels)]) + "\n"


__all__ = [
    "chamfer", "score_histogram", "build_report", "emit_report", "to_json", "SynthSpec",
    "synth_scene", "labels_json", "matrices_to_quaternions", "REDUNDANT", "FINE", "HIST_BINS",
]
