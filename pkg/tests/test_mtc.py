import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from semsplat import mtc
from semsplat.core import TrainConfig


def make_head(in_dim=4, out_dim=6, seed=0):
    return mtc.ProjectionHead.create(in_dim, out_dim,
                                     rng=np.random.default_rng(seed))


# --- semantic error map ---------------------------------------------------------

def test_error_map_zero_for_matching_features():
    head = make_head()
    f_hat = np.random.default_rng(0).random((5, 5, 4))
    proj, _ = head.forward(f_hat.reshape(-1, 4))
    f_tilde = proj.reshape(5, 5, 6).copy()
    err = mtc.semantic_error_map(f_hat, f_tilde, head)
    assert np.abs(err).max() < 1e-9


def test_error_map_antipodal_is_two():
    head = make_head()
    f_hat = np.random.default_rng(1).random((3, 3, 4))
    proj, _ = head.forward(f_hat.reshape(-1, 4))
    err = mtc.semantic_error_map(f_hat, -proj.reshape(3, 3, 6), head)
    assert np.abs(err - 2.0).max() < 1e-9


def test_error_map_zero_teacher_gives_one():
    head = make_head()
    f_hat = np.random.default_rng(2).random((2, 2, 4))
    err = mtc.semantic_error_map(f_hat, np.zeros((2, 2, 6)), head)
    assert np.abs(err - 1.0).max() < 1e-12


def test_error_map_matches_per_pixel_loop():
    head = make_head(seed=3)
    rng = np.random.default_rng(3)
    f_hat = rng.normal(0, 1, (8, 8, 4))
    f_tilde = rng.normal(0, 1, (8, 8, 6))
    err = mtc.semantic_error_map(f_hat, f_tilde, head)
    for r in range(8):
        for c in range(8):
            y, _ = head.forward(f_hat[r, c][None])
            u = y[0]
            v = f_tilde[r, c]
            cos = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
            assert abs(err[r, c] - (1 - cos)) < 1e-6


# --- prompting -------------------------------------------------------------------

def test_prompt_single_maximum():
    m = np.zeros((6, 8))
    m[3, 5] = 2.0
    assert mtc.max_error_prompt(m) == (3, 5)


def test_prompt_constant_map_breaks_to_origin():
    assert mtc.max_error_prompt(np.ones((4, 4))) == (0, 0)


def test_prompt_tie_breaks_by_linear_index():
    m = np.zeros((3, 4))
    m[1, 1] = m[2, 0] = 1.0       # linear indices 5 and 8
    assert mtc.max_error_prompt(m) == (1, 1)


@given(st.integers(0, 5_000))
@settings(max_examples=100, deadline=None)
def test_prompt_deterministic(seed):
    m = np.random.default_rng(seed).random((7, 9))
    assert mtc.max_error_prompt(m) == mtc.max_error_prompt(m.copy())


# --- mask providers --------------------------------------------------------------

def square_masks():
    # object 0: a 4x4 square in both views; object 1 only in view 1
    masks = np.zeros((2, 2, 12, 12), dtype=bool)
    masks[0, 0, 4:8, 4:8] = True
    masks[0, 1, 2:6, 3:7] = True
    masks[1, 1, 8:11, 8:11] = True
    return masks


def test_oracle_provider_returns_object_masks():
    prov = mtc.OracleMaskProvider(square_masks())
    corr = prov.get((5, 5), 0, [1])
    assert corr is not None and corr.object_id == 0
    assert corr.target_mask[5, 5]
    assert corr.source_masks[0].sum() == 16
    assert prov.calls == 1


def test_oracle_provider_background_prompt_skips():
    prov = mtc.OracleMaskProvider(square_masks())
    assert prov.get((0, 0), 0, [1]) is None


def test_perturbed_provider_dilates_square():
    prov = mtc.PerturbedMaskProvider(square_masks(), radius=1)
    corr = prov.get((5, 5), 0, [1])
    # morphological dilation oracle: a 4x4 square grows to 6x6
    expect = np.zeros((12, 12), dtype=bool)
    expect[3:9, 3:9] = True
    assert np.array_equal(corr.target_mask, expect)


def test_perturbed_provider_erodes_square():
    prov = mtc.PerturbedMaskProvider(square_masks(), radius=-1)
    corr = prov.get((5, 5), 0, [1])
    expect = np.zeros((12, 12), dtype=bool)
    expect[5:7, 5:7] = True
    assert np.array_equal(corr.target_mask, expect)


# --- view prototype loss -----------------------------------------------------------

def const_corr(h=6, w=6):
    t = np.zeros((h, w), dtype=bool)
    t[1:4, 1:4] = True
    s = np.zeros((h, w), dtype=bool)
    s[2:5, 2:5] = True
    return mtc.ObjectCorrespondence(target_mask=t, source_masks=[s],
                                    prompt_pixel=(1, 1))


def test_view_loss_zero_for_constant_features():
    v = np.array([0.3, -0.2, 0.9])
    f = np.tile(v, (6, 6, 1))
    val = mtc.view_prototype_loss(f, [f.copy()], const_corr())
    assert abs(val) < 1e-12


def test_view_loss_orthogonal_means():
    f_t = np.zeros((6, 6, 2))
    f_t[..., 0] = 1.0
    f_s = np.zeros((6, 6, 2))
    f_s[..., 1] = 1.0
    val = mtc.view_prototype_loss(f_t, [f_s], const_corr())
    assert abs(val - 1.0) < 1e-12


def test_view_loss_matches_brute_force_two_views():
    rng = np.random.default_rng(8)
    f_t = rng.normal(0, 1, (6, 6, 3))
    f_a = rng.normal(0, 1, (6, 6, 3))
    f_b = rng.normal(0, 1, (6, 6, 3))
    t = rng.random((6, 6)) > 0.5
    ma = rng.random((6, 6)) > 0.5
    mb = rng.random((6, 6)) > 0.5
    corr = mtc.ObjectCorrespondence(target_mask=t, source_masks=[ma, mb],
                                    prompt_pixel=(0, 0))
    val, *_ = mtc.view_prototype_loss_grad(f_t, [f_a, f_b], corr)
    # brute-force double loop
    mean_t = np.zeros(3)
    for r in range(6):
        for c in range(6):
            if t[r, c]:
                mean_t += f_t[r, c]
    mean_t /= t.sum()
    means = []
    for f, m in [(f_a, ma), (f_b, mb)]:
        if m.sum():
            acc = np.zeros(3)
            for r in range(6):
                for c in range(6):
                    if m[r, c]:
                        acc += f[r, c]
            means.append(acc / m.sum())
    mean_s = np.mean(means, axis=0)
    cos = mean_t @ mean_s / (np.linalg.norm(mean_t) * np.linalg.norm(mean_s))
    assert abs(val - (1 - cos)) < 1e-6


def test_view_loss_skips_when_all_sources_empty():
    f = np.random.default_rng(9).normal(0, 1, (6, 6, 3))
    corr = mtc.ObjectCorrespondence(
        target_mask=np.ones((6, 6), bool),
        source_masks=[np.zeros((6, 6), bool)], prompt_pixel=(0, 0))
    val, gt, gs, counted = mtc.view_prototype_loss_grad(f, [f.copy()], corr)
    assert val == 0.0 and not counted
    assert np.count_nonzero(gt) == 0


@given(st.integers(0, 2_000), st.floats(0.1, 10.0))
@settings(max_examples=100, deadline=None)
def test_view_loss_bounded_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    f_t = rng.normal(0, 1, (5, 5, 3))
    f_s = rng.normal(0, 1, (5, 5, 3))
    corr = const_corr(5, 5)
    a = mtc.view_prototype_loss(f_t, [f_s], corr)
    b = mtc.view_prototype_loss(scale * f_t, [scale * f_s], corr)
    assert 0.0 <= a <= 2.0
    assert abs(a - b) < 1e-9


def test_view_loss_gradient_matches_fd():
    rng = np.random.default_rng(10)
    f_t = rng.normal(0, 1, (5, 5, 3))
    f_s = rng.normal(0, 1, (5, 5, 3))
    corr = const_corr(5, 5)
    val, g_t, g_s, _ = mtc.view_prototype_loss_grad(f_t, [f_s], corr)
    h = 1e-6
    for arr, g in [(f_t, g_t), (f_s, g_s[0])]:
        for idx in [(1, 1, 0), (3, 3, 2), (2, 2, 1)]:
            orig = arr[idx]
            arr[idx] = orig + h
            vp = mtc.view_prototype_loss(f_t, [f_s], corr)
            arr[idx] = orig - h
            vm = mtc.view_prototype_loss(f_t, [f_s], corr)
            arr[idx] = orig
            fd = (vp - vm) / (2 * h)
            assert abs(fd - g[idx]) < 1e-6 + 1e-4 * abs(fd)


# --- region prototype / density weights ---------------------------------------------

def test_region_prototype_unit_inputs():
    v = np.array([0.6, 0.8])
    p, normed = mtc.region_prototype(np.tile(v, (4, 1)))
    assert np.allclose(p, v)
    assert np.allclose(normed, v)


def test_region_prototype_mean_of_two():
    p, _ = mtc.region_prototype(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert np.allclose(p, [0.5, 0.5])


def test_region_prototype_matches_normalize_then_average():
    rng = np.random.default_rng(11)
    f = rng.normal(0, 2, (5, 4))
    p, normed = mtc.region_prototype(f)
    expect = np.stack([row / np.linalg.norm(row) for row in f])
    assert np.abs(normed - expect).max() < 1e-6
    assert np.abs(p - expect.mean(axis=0)).max() < 1e-6


def test_region_prototype_keeps_zero_rows():
    f = np.array([[0.0, 0.0], [3.0, 4.0]])
    p, normed = mtc.region_prototype(f)
    assert np.allclose(normed[0], 0.0)
    assert np.allclose(normed[1], [0.6, 0.8])


def test_density_weights_symmetric_pair():
    w = mtc.density_weights(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    assert np.allclose(w, [0.5, 0.5])


def test_density_weights_collinear_oracle():
    mus = np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
    w = mtc.density_weights(mus)
    # brute-force pairwise distances
    d = np.zeros(3)
    for i in range(3):
        for j in range(3):
            d[i] += np.linalg.norm(mus[i] - mus[j])
    d /= 3
    inv = 1 / d
    assert np.abs(w - inv / inv.sum()).max() < 1e-12
    assert w.argmax() == 1        # middle point is densest


def test_density_weights_singleton_and_degenerate():
    assert np.allclose(mtc.density_weights(np.zeros((1, 3))), [1.0])
    w = mtc.density_weights(np.zeros((4, 3)))     # identical points: guard
    assert np.allclose(w, 0.25)


@given(st.integers(0, 2_000))
@settings(max_examples=100, deadline=None)
def test_density_weights_properties(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(2, 9)
    mus = rng.normal(0, 1, (n, 3))
    w = mtc.density_weights(mus)
    assert abs(w.sum() - 1.0) < 1e-9
    assert (w > 0).all()
    perm = rng.permutation(n)
    assert np.abs(mtc.density_weights(mus[perm]) - w[perm]).max() < 1e-9
    # rigid transform invariance
    q = rng.normal(0, 1, 4)
    q /= np.linalg.norm(q)
    from semsplat.core import quat_to_rotmat
    R = quat_to_rotmat(q)
    shifted = mus @ R.T + rng.normal(0, 1, 3)
    assert np.abs(mtc.density_weights(shifted) - w).max() < 1e-8


# --- geometry prototype loss ----------------------------------------------------------

def test_geometry_loss_zero_for_identical_feats():
    f = np.tile([0.6, 0.8], (5, 1))
    mus = np.random.default_rng(12).normal(0, 1, (5, 3))
    assert abs(mtc.geometry_prototype_loss(f, mus)) < 1e-12


def test_geometry_loss_orthogonal_pair():
    # two orthogonal unit embeddings with symmetric centers: w = (1/2, 1/2),
    # residual to the mean prototype has squared norm 1/2 each
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    mus = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    val = mtc.geometry_prototype_loss(f, mus)
    assert abs(val - 0.5) < 1e-12


def test_geometry_loss_matches_brute_force():
    rng = np.random.default_rng(13)
    f = rng.normal(0, 1, (6, 4))
    mus = rng.normal(0, 1, (6, 3))
    val = mtc.geometry_prototype_loss(f, mus)
    normed = np.stack([row / np.linalg.norm(row) for row in f])
    p = normed.mean(axis=0)
    d = np.zeros(6)
    for i in range(6):
        for j in range(6):
            d[i] += np.linalg.norm(mus[i] - mus[j])
    d /= 6
    w = (1 / d) / (1 / d).sum()
    expect = sum(w[i] * np.sum((normed[i] - p) ** 2) for i in range(6))
    assert abs(val - expect) < 1e-6


def test_geometry_loss_permutation_invariant():
    rng = np.random.default_rng(14)
    f = rng.normal(0, 1, (7, 4))
    mus = rng.normal(0, 1, (7, 3))
    perm = rng.permutation(7)
    a = mtc.geometry_prototype_loss(f, mus)
    b = mtc.geometry_prototype_loss(f[perm], mus[perm])
    assert abs(a - b) < 1e-9


def test_geometry_loss_rejects_singleton():
    with pytest.raises(ValueError):
        mtc.geometry_prototype_loss(np.ones((1, 3)), np.ones((1, 3)))


def test_geometry_loss_gradients_match_fd():
    rng = np.random.default_rng(15)
    f = rng.normal(0, 1, (5, 3))
    mus = rng.normal(0, 1, (5, 3))
    val, gf, gm = mtc.geometry_prototype_loss_grad(f, mus)
    h = 1e-6
    for arr, g in [(f, gf), (mus, gm)]:
        for idx in [(0, 0), (2, 1), (4, 2)]:
            orig = arr[idx]
            arr[idx] = orig + h
            vp = mtc.geometry_prototype_loss(f, mus)
            arr[idx] = orig - h
            vm = mtc.geometry_prototype_loss(f, mus)
            arr[idx] = orig
            fd = (vp - vm) / (2 * h)
            assert abs(fd - g[idx]) < 1e-6 + 1e-4 * abs(fd), (arr is f, idx)


def test_geometry_loss_uniform_weights_mode():
    rng = np.random.default_rng(16)
    f = rng.normal(0, 1, (5, 3))
    mus = rng.normal(0, 1, (5, 3))
    val, gf, gm = mtc.geometry_prototype_loss_grad(f, mus, geo_aware=False)
    assert np.count_nonzero(gm) == 0
    normed = np.stack([row / np.linalg.norm(row) for row in f])
    p = normed.mean(axis=0)
    expect = np.mean(np.sum((normed - p) ** 2, axis=1))
    assert abs(val - expect) < 1e-9


# --- curriculum mixing ------------------------------------------------------------------

def test_mixed_loss_phase_one():
    cfg = TrainConfig()
    assert mtc.mixed_sem_loss(0, cfg, 0.3, 9.0, 9.0) == 0.3


def test_mixed_loss_phase_two_direct_eval():
    cfg = TrainConfig()
    val = mtc.mixed_sem_loss(cfg.tau, cfg, 0.3, 0.2, 0.1)
    assert abs(val - 0.45) < 1e-12


def test_mixed_loss_phase_two_zero_terms():
    cfg = TrainConfig()
    assert mtc.mixed_sem_loss(cfg.tau, cfg, 0.3, 0.0, 0.0) == 0.3


def test_mixed_loss_disabled_curriculum():
    cfg = TrainConfig(mtc_enabled=False)
    assert mtc.mixed_sem_loss(99, cfg, 0.3, 5.0, 5.0) == 0.3


# --- RLE round trip ----------------------------------------------------------------------

@given(st.integers(0, 2_000))
@settings(max_examples=100, deadline=None)
def test_rle_round_trip(seed):
    mask = np.random.default_rng(seed).random((9, 7)) > 0.6
    rle = mtc.mask_to_rle(mask)
    assert np.array_equal(mtc.rle_to_mask(rle, mask.shape), mask)


def test_head_backward_matches_fd():
    head = make_head(in_dim=3, out_dim=4, seed=17)
    rng = np.random.default_rng(17)
    x = rng.normal(0, 1, (10, 3))
    wsum = rng.normal(0, 1, (10, 4))

    def loss():
        y, _ = head.forward(x)
        return float((y * wsum).sum())

    y, cache = head.forward(x)
    gx, grads = head.backward(cache, wsum)
    h = 1e-6
    for name in ("w1", "b1", "w2", "b2"):
        arr = getattr(head, name)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = loss()
            arr[idx] = orig - h
            lm = loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads[name][idx]) < 1e-5 + 1e-4 * abs(fd)
    for idx in [(0, 0), (5, 2), (9, 1)]:
        orig = x[idx]
        x[idx] = orig + h
        lp = loss()
        x[idx] = orig - h
        lm = loss()
        x[idx] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - gx[idx]) < 1e-5 + 1e-4 * abs(fd)
