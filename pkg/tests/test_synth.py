import numpy as np
import pytest

from semsplat import metrics, raster, synth
from semsplat.core import Camera, ConfigError, activate, check_pixel_alignment
from conftest import FIXTURE_SCENE_SEED


def test_generate_deterministic_per_seed():
    a = synth.generate(synth.SceneSpec(seed=5))
    b = synth.generate(synth.SceneSpec(seed=5))
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.class_id, b.class_id)


def test_empty_scene_background_and_far():
    spec = synth.SceneSpec(seed=0, room=None, n_objects=0)
    scene = synth.generate(spec)
    far = scene.cameras[0].far
    assert np.allclose(scene.depth, far)
    assert (scene.class_id == 0).all()
    assert not scene.hit.any()
    assert np.allclose(scene.images, 0.0)


def test_fronto_parallel_plane_constant_depth():
    # plane at x = 0 facing a camera 2 units away along -x
    spec = synth.SceneSpec(seed=0, room=None, n_objects=0, image_size=16,
                           fov_deg=30.0)
    shape = synth.Shape(kind="plane", class_id=4,
                        color=np.array([0.5, 0.5, 0.5]),
                        lo=np.array([0.0, -5.0, -5.0]),
                        hi=np.array([0.0, 5.0, 5.0]), axis=0, value=0.0)
    R = np.array([[0.0, 1.0, 0.0],
                  [0.0, 0.0, -1.0],
                  [-1.0, 0.0, 0.0]])
    pos = np.array([2.0, 0.0, 0.0])
    cam = Camera(fx=30.0, fy=30.0, cx=7.5, cy=7.5, R=R, t=-R @ pos,
                 width=16, height=16, near=0.1, far=10.0)
    cam.validate()
    color, depth, cls, hit, sidx = synth._cast_view([shape], {}, cam, 10.0)
    assert hit.all()
    assert np.abs(depth - 2.0).max() < 1e-9
    assert (cls == 4).all()


def test_sphere_silhouette_radius():
    # analytic projection: a sphere of radius r centered on the view axis at
    # depth z subtends about fx * r / z pixels
    spec = synth.SceneSpec(seed=0, room=None, n_objects=0)
    shape = synth.Shape(kind="sphere", class_id=4,
                        color=np.array([1.0, 0.0, 0.0]),
                        center=np.array([0.0, 0.0, 2.0]), radius=0.5)
    cam = Camera(fx=60.0, fy=60.0, cx=31.5, cy=31.5, R=np.eye(3),
                 t=np.zeros(3), width=64, height=64, near=0.1, far=10.0)
    color, depth, cls, hit, sidx = synth._cast_view([shape], {}, cam, 10.0)
    area = hit.sum()
    expect_r = 60.0 * 0.5 / 2.0
    # silhouette of a sphere is slightly larger than fx r / z (tangent cone)
    got_r = np.sqrt(area / np.pi)
    assert abs(got_r - expect_r) / expect_r < 0.1


def test_scene_validations():
    scene = synth.generate(synth.SceneSpec(seed=FIXTURE_SCENE_SEED))
    assert scene.object_masks.shape[0] >= 1
    # every object mask nonempty in at least one view
    assert scene.object_masks.any(axis=(1, 2, 3)).all()
    assert scene.hit.all()       # room scenes cover every pixel
    assert scene.depth.min() > 0
    with pytest.raises(ConfigError):
        synth.generate(synth.SceneSpec(seed=0, n_views=1))


def test_class_embeddings_separated():
    rng = np.random.default_rng(0)
    emb = synth.class_embeddings(8, 32, rng)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0)
    cos = emb @ emb.T
    np.fill_diagonal(cos, 0.0)
    assert cos.max() < 0.5


def test_teacher_clean_features_classify_perfectly(default_scene):
    spec = synth.SceneSpec(seed=FIXTURE_SCENE_SEED, feat_noise=0.0,
                           blob_rate=0.0, depth_noise=0.0)
    scene = synth.generate(spec)
    teacher = synth.make_teacher(scene, spec)
    assert np.allclose(teacher.confidence, 1.0)
    for v in range(scene.n_views):
        scores = teacher.teacher_feat[v].reshape(-1, 32) @ teacher.class_embed.T
        pred = scores.argmax(1).reshape(scene.class_id[v].shape)
        assert (pred == scene.class_id[v]).all()
    assert np.allclose(teacher.point_map[0],
                       scene.cameras[0].unproject(scene.depth[0]))


def teacher_miou(scene, teacher):
    vals = []
    for v in range(scene.n_views):
        scores = teacher.teacher_feat[v].reshape(-1, teacher.feat_dim) \
            @ teacher.class_embed.T
        pred = scores.argmax(1).reshape(scene.class_id[v].shape)
        vals.append(metrics.seg_metrics(pred, scene.class_id[v],
                                        scene.spec.n_classes)[0])
    return float(np.mean(vals))


def test_teacher_accuracy_monotone_in_blob_rate():
    mious = []
    for rho in (0.0, 0.1, 0.3):
        spec = synth.SceneSpec(seed=2, blob_rate=rho)
        scene = synth.generate(spec)
        teacher = synth.make_teacher(scene, spec)
        mious.append(teacher_miou(scene, teacher))
    assert mious[0] > mious[1] > mious[2]
    assert mious[1] < 1.0


def test_teacher_mask_perturbation(default_scene):
    spec = synth.SceneSpec(seed=FIXTURE_SCENE_SEED, mask_perturb_radius=1)
    scene = synth.generate(synth.SceneSpec(seed=FIXTURE_SCENE_SEED))
    teacher = synth.make_teacher(scene, spec)
    grown = teacher.object_masks.sum()
    exact = scene.object_masks.sum()
    assert grown > exact


def test_init_pixel_aligned_bijection_and_count(default_scene):
    gset = synth.init_pixel_aligned(default_scene, sigma_init=0.0)
    assert gset.count == 2 * 64 * 64
    check_pixel_alignment(gset, [(64, 64), (64, 64)])


def test_init_unproject_project_round_trip(default_scene):
    gset = synth.init_pixel_aligned(default_scene, sigma_init=0.0)
    for v, cam in enumerate(default_scene.cameras):
        sel = gset.src_view == v
        uv, z = cam.project_points(gset.mu[sel])
        px = gset.src_pixel[sel]
        assert np.abs(uv[:, 0] - px[:, 1]).max() < 1e-5
        assert np.abs(uv[:, 1] - px[:, 0]).max() < 1e-5
        gt_depth = default_scene.depth[v][px[:, 0], px[:, 1]]
        assert np.abs(z - gt_depth).max() < 1e-5


def test_init_render_psnr_sanity(default_scene):
    # measured once on the fixture scene and pinned: an untrained
    # pixel-aligned init re-renders its source views above 25 dB
    gset = synth.init_pixel_aligned(default_scene, sigma_init=0.0)
    act = activate(gset)
    vals = [metrics.psnr(np.clip(raster.render(act, cam).color, 0, 1),
                         default_scene.images[v])
            for v, cam in enumerate(default_scene.cameras)]
    assert np.mean(vals) > 25.0


def test_init_noise_scales_with_sigma(default_scene):
    g0 = synth.init_pixel_aligned(default_scene, sigma_init=0.0,
                                  rng=np.random.default_rng(0))
    g1 = synth.init_pixel_aligned(default_scene, sigma_init=0.05,
                                  rng=np.random.default_rng(0))
    d = np.linalg.norm(g1.mu - g0.mu, axis=1)
    assert d.mean() > 0.01
    assert np.median(np.abs(g1.mu[:, 2] - g0.mu[:, 2])) < 0.5


def test_scene_cache_round_trip(tmp_path, default_scene):
    from semsplat import imgio
    imgio.write_ppm(tmp_path / "v0.ppm", default_scene.images[0])
    back = imgio.read_ppm(tmp_path / "v0.ppm")
    assert np.abs(back - default_scene.images[0]).max() < 1.0 / 255
    imgio.write_pfm(tmp_path / "d0.pfm", default_scene.depth[0])
    depth = imgio.read_pfm(tmp_path / "d0.pfm")
    assert np.abs(depth - default_scene.depth[0]).max() < 1e-4
