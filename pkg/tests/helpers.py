"""Shared constructions for sanity bounds used by unit and acceptance tests."""

import numpy as np

from semsplat import synth


def quat_aligning_z_to(n: np.ndarray) -> np.ndarray:
    ez = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(ez, n))
    if c > 0.9999:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -0.9999:
        return np.array([0.0, 1.0, 0.0, 0.0])
    ax = np.cross(ez, n)
    ax = ax / np.linalg.norm(ax)
    th = np.arccos(c)
    return np.concatenate([[np.cos(th / 2)], np.sin(th / 2) * ax])


def gt_room_disks(scene, opacity_logit: float = 8.0, flatten: float = 0.1):
    """Near-opaque ground-truth reconstruction of an empty room scene.

    Splats sit exactly on the surfaces (sigma_init = 0) and are flattened
    along the analytically known face normal, which an ideal reconstruction
    would recover; used to sanity-check the evaluator's upper range.
    """
    spec = scene.spec
    assert spec.n_objects == 0 and spec.room is not None
    g = synth.init_pixel_aligned(scene, sigma_init=0.0)
    g.opacity_logit[:] = opacity_logit
    ex, ey, h = spec.room
    normals = [np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]),
               np.array([-1.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
               np.array([0.0, -1.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    for i in range(g.count):
        p = g.mu[i]
        dists = [abs(p[2] - 0.0), abs(p[2] - h), abs(p[0] - ex),
                 abs(p[0] + ex), abs(p[1] - ey), abs(p[1] + ey)]
        g.rot[i] = quat_aligning_z_to(normals[int(np.argmin(dists))])
    g.log_scale[:, 2] += np.log(flatten)
    return g
