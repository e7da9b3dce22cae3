import numpy as np
import pytest

from semsplat import synth
from semsplat.core import Camera, GaussianSet, activate


FIXTURE_SCENE_SEED = 0


@pytest.fixture(scope="session")
def default_scene():
    return synth.generate(synth.SceneSpec(seed=FIXTURE_SCENE_SEED))


@pytest.fixture(scope="session")
def default_teacher(default_scene):
    return synth.make_teacher(default_scene)


def toy_camera(size=16, fx=16.0):
    return Camera(fx=fx, fy=fx, cx=(size - 1) / 2, cy=(size - 1) / 2,
                  R=np.eye(3), t=np.zeros(3), width=size, height=size,
                  near=0.1, far=10.0)


def toy_gaussians(seed, n=6, d=4, spread=0.15, z_range=(1.8, 2.6),
                  scale_range=(0.05, 0.12), opacity_range=(-1.5, 1.5)):
    """Small random sets projecting well inside a 16x16 toy camera.

    Placement keeps splats away from image borders and the depth range spread
    out, so finite-difference probes never cross a visibility or sorting
    boundary.
    """
    rng = np.random.default_rng(seed)
    z = rng.uniform(*z_range, n)
    return GaussianSet(
        mu=np.column_stack([rng.uniform(-spread, spread, n) * z / 2.0,
                            rng.uniform(-spread, spread, n) * z / 2.0,
                            z]),
        log_scale=np.log(rng.uniform(*scale_range, (n, 3))),
        rot=rng.normal(0, 1.0, (n, 4)),
        opacity_logit=rng.uniform(*opacity_range, n),
        color_logit=rng.normal(0, 1.0, (n, 3)),
        feat=rng.normal(0, 0.5, (n, d)),
        src_view=np.zeros(n, dtype=np.int64),
        src_pixel=np.column_stack([rng.integers(0, 16, n),
                                   rng.integers(0, 16, n)]),
    )


def toy_activated(seed, **kw):
    return activate(toy_gaussians(seed, **kw))
