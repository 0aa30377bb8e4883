import math

import numpy as np
import pytest

from splatprune.errors import DegenerateFrame, NoCameras
from splatprune.hsfh import (appearance_histogram, appearance_histograms, compute_descriptors,
                             darboux_angles, fpfh, fpfh_all, min_axis_normals, pair_features,
                             power_spectra, sh_power_spectrum, spfh, spfh_all, splat_normal,
                             view_features, view_features_all)
from splatprune.spatial import knn_graph, voxel_downsample
from splatprune.splat_io import SplatScene, covariances, normalize_quaternions, quaternion_to_matrix

import reference as ref
from conftest import random_quaternions, random_scene, rigid_transform


def _one(rotation, scale_log, position=(0, 0, 0), sh_rest=None, sh_dc=(0, 0, 0)):
    return SplatScene.from_arrays([position], [scale_log], [rotation], [0.0], [sh_dc],
                                  None if sh_rest is None else [sh_rest])[0]


def test_normal_identity_min_z():
    s = _one([1, 0, 0, 0], [0, 0, -1], position=(0, 0, 1))
    np.testing.assert_allclose(splat_normal(s, [0, 0, 0]), [0, 0, 1])
    s = _one([1, 0, 0, 0], [0, 0, -1], position=(0, 0, -1))
    np.testing.assert_allclose(splat_normal(s, [0, 0, 0]), [0, 0, -1])


def test_normal_isotropic_uses_rotated_z(rng):
    q = random_quaternions(rng, 1)[0]
    R = quaternion_to_matrix(q[None])[0]
    s = _one(q, [-2, -2, -2], position=R[:, 2])
    np.testing.assert_allclose(splat_normal(s, [0, 0, 0]), R[:, 2], atol=1e-12)


def test_normal_sign_tie_rule():
    # centroid on the splat: largest-magnitude component made positive
    s = _one([0, 1, 0, 0], [0, 0, -1])  # 180 deg about x: z axis -> -z
    np.testing.assert_allclose(splat_normal(s, [0, 0, 0]), [0, 0, 1], atol=1e-12)


def test_normals_match_eigen_oracle(rng):
    n = 300
    rot = random_quaternions(rng, n)
    sl = rng.uniform(-5, 0, size=(n, 3))
    pos = rng.normal(size=(n, 3))
    cen = rng.normal(size=(n, 3))
    got = min_axis_normals(rot, sl, pos, cen)
    for i in range(n):
        np.testing.assert_allclose(got[i], ref.eig_normal(rot[i], sl[i], pos[i], cen[i]), atol=1e-6)
    cov = covariances(normalize_quaternions(rot), sl)
    lam = np.exp(2 * sl.min(axis=1))
    np.testing.assert_allclose(np.einsum("nij,nj->ni", cov, got), lam[:, None] * got, atol=1e-9)


def test_darboux_examples():
    z = np.array([0.0, 0, 1])
    assert darboux_angles([0, 0, 0], z, [1, 0, 0], z) == (0.0, 0.0, 0.0)
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        a, s, t = darboux_angles([0, 0, 0], n, rng.normal(size=3), n)
        assert a == pytest.approx(0, abs=1e-12) and t == pytest.approx(0, abs=1e-12)


def test_darboux_degenerate():
    z = [0.0, 0, 1]
    with pytest.raises(DegenerateFrame):
        darboux_angles([1, 1, 1], z, [1, 1, 1], z)
    with pytest.raises(DegenerateFrame):
        darboux_angles([0, 0, 0], z, [0, 0, 2], z)


def test_darboux_matches_scalar_formula(rng):
    for _ in range(200):
        p_s, p_t = rng.normal(size=3), rng.normal(size=3)
        n_s, n_t = (v / np.linalg.norm(v) for v in rng.normal(size=(2, 3)))
        d = (p_t - p_s) / math.dist(p_t, p_s)
        v = np.cross(d, n_s)
        v /= math.sqrt(v @ v)
        w = np.cross(n_s, v)
        expect = (v @ n_t, n_s @ d, math.atan2(w @ n_t, n_s @ n_t))
        np.testing.assert_allclose(darboux_angles(p_s, n_s, p_t, n_t), expect, atol=1e-12)


def test_pair_features_match_reference(rng):
    p1, p2 = rng.normal(size=(2, 100, 3))
    n1, n2 = (v / np.linalg.norm(v, axis=1, keepdims=True) for v in rng.normal(size=(2, 100, 3)))
    a, s, t, ok = pair_features(p1, n1, p2, n2)
    for i in range(100):
        r = ref.pair(p1[i], n1[i], p2[i], n2[i])
        assert ok[i]
        np.testing.assert_allclose((a[i], s[i], t[i]), r, atol=1e-12)


def test_spfh_center_bins():
    z = np.array([0.0, 0, 1])
    h = spfh([[0, 0, 0], [1, 0, 0]], [z, z], 0, [1])
    assert h[5] == h[16] == h[27] == 1.0
    assert h.sum() == 3.0
    # duplicated identical geometry leaves the histogram unchanged
    h2 = spfh([[0, 0, 0], [1, 0, 0], [1, 0, 0]], [z, z, z], 0, [1, 2])
    np.testing.assert_array_equal(h, h2)


def test_spfh_empty_neighbourhood_flagged():
    z = np.array([0.0, 0, 1])
    hist, empty = spfh_all(np.array([[0, 0, 0], [0, 0, 1.0]]), np.array([z, z]), np.array([[1], [0]]))
    assert np.all(empty)
    assert np.all(hist == 0)


def test_spfh_matches_reference(rng):
    pts = rng.normal(size=(50, 3))
    nrm = rng.normal(size=(50, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    idx, _ = knn_graph(pts, 8)
    table, _ = spfh_all(pts, nrm, idx)
    for i in range(50):
        np.testing.assert_array_equal(table[i], ref.spfh(pts.tolist(), nrm.tolist(), i, list(idx[i])))
        np.testing.assert_array_equal(spfh(pts, nrm, i, idx[i]), table[i])


def test_fpfh_single_pair_equals_spfh():
    z = np.array([0.0, 0, 1])
    pts = np.array([[0, 0, 0], [1, 0, 0.0]])
    table, _ = spfh_all(pts, np.array([z, z]), np.array([[1], [0]]))
    np.testing.assert_allclose(fpfh(table, 0, [(1, 1.0)], 1.0), table[0], atol=1e-15)
    np.testing.assert_allclose(fpfh(table, 0, [], 1.0), table[0])


@pytest.mark.parametrize("seed", range(5))
def test_fpfh_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(size=(200, 3))
    nrm = rng.normal(size=(200, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    eps = 1e-9 * 0.01
    expect, nbrs = ref.fpfh_all(pts.tolist(), nrm.tolist(), 8, eps)
    idx, dist = knn_graph(pts, 8)
    table, _ = spfh_all(pts, nrm, idx)
    got = fpfh_all(table, idx, dist, 0.01)
    assert np.max(np.abs(got - expect)) < 1e-9
    for i in (0, 17, 199):
        assert np.max(np.abs(fpfh(table, i, nbrs[i], 0.01) - expect[i])) < 1e-9


def test_power_spectrum_examples():
    s = _one([1, 0, 0, 0], [0, 0, 0], sh_dc=(0.5, 0.5, 0.5), sh_rest=np.zeros(45))
    np.testing.assert_allclose(sh_power_spectrum(s, normalize=False), [0.75, 0, 0, 0])
    np.testing.assert_allclose(sh_power_spectrum(s), [1, 0, 0, 0])
    s = _one([1, 0, 0, 0], [0, 0, 0], sh_rest=np.zeros(45))
    np.testing.assert_array_equal(sh_power_spectrum(s), np.zeros(4))


def test_power_spectrum_parseval_and_layout(rng):
    dc = rng.normal(size=(20, 3))
    rest = rng.normal(size=(20, 45))
    raw = power_spectra(dc, rest, 3, normalize=False)
    np.testing.assert_allclose(raw.sum(axis=1), (dc ** 2).sum(1) + (rest ** 2).sum(1), rtol=1e-12)
    # band 1 holds coefficients 0..2 of each channel block of 15
    band1 = sum((rest[:, c * 15:c * 15 + 3] ** 2).sum(1) for c in range(3))
    np.testing.assert_allclose(raw[:, 1], band1, rtol=1e-12)
    norm = power_spectra(dc, rest, 3)
    np.testing.assert_allclose(norm.sum(axis=1), 1.0, atol=1e-12)


def test_appearance_identical_colours():
    h = appearance_histogram(None, [[0.3, 0.3, 0.3]] * 5, d_max=1.0)
    assert h[0] == 1.0 and h.sum() == 1.0
    assert np.all(appearance_histogram(None, [], d_max=1.0) == 0)


def test_appearance_two_clusters_direct_binning(rng):
    colours = np.vstack([np.full((4, 3), -0.5), np.full((4, 3), 0.5)]) + rng.normal(0, 0.01, (8, 3))
    d_max = 2.0
    h = appearance_histogram(None, colours, d_max=d_max)
    dev = np.linalg.norm(colours - colours.mean(axis=0), axis=1)
    expect = np.zeros(16)
    for d in dev:
        expect[min(int(d / d_max * 16), 15)] += 1 / 8
    np.testing.assert_allclose(h, expect)
    # both clusters sit about sqrt(3)/2 from the mean, so the mass is concentrated away from bin 0
    assert h[0] == 0


def test_appearance_histograms_normalized(rng):
    colours = rng.normal(size=(100, 3))
    idx, _ = knn_graph(rng.normal(size=(100, 3)), 6)
    h = appearance_histograms(colours, idx)
    np.testing.assert_allclose(h.sum(axis=1), 1.0, atol=1e-12)


def test_view_features_single_and_axis_camera():
    cam = [{"center": [0, 0, 2.0], "forward": [0, 0, -1.0]}]
    f = view_features([0, 0, 0], [0, 0, 1], cam, diagonal=2.0)
    np.testing.assert_allclose(f, [1, 1, 1, 1, 1, 1, 1, 1, 1, 1 / 32])
    with pytest.raises(NoCameras):
        view_features([0, 0, 0], [0, 0, 1], [], 1.0)


def test_view_features_three_cameras():
    cams = [{"center": [3, 0, 0.0], "forward": [-1, 0, 0.0]},
            {"center": [0, 0, 1.0], "forward": [0, 0, -1.0]},
            {"center": [0, 4, 3.0], "forward": [0, -0.6, -0.8]}]
    n = np.array([0, 0, 1.0])
    f = view_features([0, 0, 0], n, cams, diagonal=10.0)
    dist = [0.3, 0.1, 0.5]
    cview = [0.0, 1.0, 0.6]
    cfwd = [0.0, 1.0, 0.8]
    expect = []
    for q in (dist, cview, cfwd):
        expect += [min(q), sum(q) / 3, max(q)]
    np.testing.assert_allclose(f, expect + [3 / 32], atol=1e-12)


def test_view_features_camera_count_clamped(rng):
    centers = rng.normal(size=(40, 3)) + 5
    f = view_features_all(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), centers, np.tile([0, 0, 1.0], (40, 1)), 1.0)
    assert f[0, 9] == 1.0


def _descriptors(scene, k=8, frac=0.05):
    m = voxel_downsample(scene, voxel_frac=frac)
    idx, dist = knn_graph(m.centroid, min(k, m.n_voxels - 1))
    return m, compute_descriptors(scene, m, idx, dist)


def test_descriptor_blocks_normalized():
    scene = random_scene(600, sh_degree=2, seed=3)
    _, table = _descriptors(scene)
    g = table.geometric.reshape(len(table), 3, 11).sum(axis=2)
    live = ~table.empty
    np.testing.assert_allclose(g[live], 1.0, atol=1e-9)
    np.testing.assert_allclose(table.appearance_hist.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(table.power_spectrum >= 0)
    assert np.all(np.isfinite(table.full()))


@pytest.mark.parametrize("seed", range(4))
def test_rigid_invariance_of_descriptors(seed):
    # one splat per voxel so the voxel partition cannot change under rotation
    rng = np.random.default_rng(seed)
    g = np.arange(6) * 0.2
    grid = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    pos = grid + rng.uniform(-0.03, 0.03, size=grid.shape)
    n = len(pos)
    scene = SplatScene.from_arrays(pos, rng.uniform(-5, -2, (n, 3)), random_quaternions(rng, n),
                                   rng.normal(size=n), rng.normal(size=(n, 3)))
    moved = rigid_transform(scene, seed + 100)
    m1, d1 = _descriptors(scene, frac=0.01)
    m2, d2 = _descriptors(moved, frac=0.01)
    assert m1.n_voxels == m2.n_voxels == n
    # voxels may be ordered differently; align them through their splat
    o1 = m1.splat_to_voxel
    o2 = m2.splat_to_voxel
    assert np.max(np.abs(d1.geometric[o1] - d2.geometric[o2])) < 1e-6
    assert np.max(np.abs(d1.full()[o1] - d2.full()[o2])) < 1e-6


def test_no_nan_on_fuzzed_scenes():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        scene = random_scene(n, sh_degree=int(rng.integers(0, 4)), seed=seed,
                             spread=float(rng.choice([1e-3, 1.0, 1e3])))
        m, table = _descriptors(scene, k=int(rng.integers(1, 10)), frac=0.1)
        assert np.all(np.isfinite(table.full()))
