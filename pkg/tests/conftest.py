import numpy as np
import pytest

from splatprune.splat_io import SplatScene, n_rest


def random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(n, sh_degree=0, seed=0, spread=1.0, normals=True):
    rng = np.random.default_rng(seed)
    return SplatScene.from_arrays(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        scale_log=rng.uniform(-5.0, -2.0, size=(n, 3)),
        rotation=random_quaternions(rng, n),
        opacity_logit=rng.normal(0.0, 2.0, size=n),
        sh_dc=rng.normal(0.0, 0.5, size=(n, 3)),
        sh_rest=rng.normal(0.0, 0.1, size=(n, n_rest(sh_degree))),
        normals=normals,
    )


def random_rotation(rng):
    q = random_quaternions(rng, 1)[0]
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return q, R


def quat_mul(a, b):
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def rigid_transform(scene, seed):
    """Rotate and translate every splat (positions and orientations)."""
    rng = np.random.default_rng(seed)
    q, R = random_rotation(rng)
    t = rng.uniform(-5, 5, size=3)
    rot = quat_mul(np.broadcast_to(q, (len(scene), 4)), scene.rotations)
    return SplatScene.from_arrays(scene.positions @ R.T + t, scene.scale_log, rot,
                                  scene.opacity_logit, scene.sh_dc, scene.sh_rest)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
