"""Per-scene optimization loop wiring capacity control, the semantic
curriculum, and the composite loss into one trainer, plus the mask-free
evaluation path.

The loop structure per iteration:

1. project + bin each source view once, render the full set (color only) and
   measure per-splat reconstruction error;
2. sample the retain mask from the active dropout policy (training only);
3. re-composite the masked set with all channels;
4. photometric + semantic (+ prototype terms from epoch tau) + geometric
   losses, with upstream gradients assembled per view;
5. one backward pass per view through the rasterizer, plus direct prototype
   gradients on embeddings and centers;
6. adaptive (Adam-style) update of every parameter group and the head.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import egd, losses, mtc, raster
from .core import (ConfigError, GaussianSet, TrainConfig, activate,
                   save_gaussians, load_gaussians)
from .losses import LossReport
from .synth import Scene


class TrainAbort(RuntimeError):
    """Raised when the loss turns non-finite; carries an iteration dump."""

    def __init__(self, iteration: int, dump: dict):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.dump = dump


GAUSSIAN_GROUPS = ("mu", "log_scale", "rot", "opacity_logit", "color_logit",
                   "feat")
HEAD_GROUPS = ("w1", "b1", "w2", "b2")


class Adam:
    """Per-group adaptive gradient updates (beta 0.9/0.999, eps 1e-8)."""

    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[name] -= self.lrs[name] * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainState:
    """Bundled mutable training state (used for checkpoints and tests)."""

    gaussians: GaussianSet
    head: mtc.ProjectionHead
    optimizer: Adam
    t_iter: int = 0
    epoch: int = 0


def _iteration_rng(seed: int, t_iter: int):
    return np.random.default_rng(np.random.SeedSequence((seed, 101, t_iter)))


def make_optimizer(config: TrainConfig, scene_scale: float) -> Adam:
    lrs = {
        "mu": config.lr_mu * scene_scale,
        "log_scale": config.lr_log_scale,
        "rot": config.lr_rot,
        "opacity_logit": config.lr_opacity,
        "color_logit": config.lr_color,
        "feat": config.lr_feat,
        "w1": config.lr_head, "b1": config.lr_head,
        "w2": config.lr_head, "b2": config.lr_head,
    }
    return Adam(lrs, config.adam_beta1, config.adam_beta2, config.adam_eps)


def train_scene(scene: Scene, teacher, config: TrainConfig,
                gset: GaussianSet | None = None,
                head: mtc.ProjectionHead | None = None,
                mask_provider=None,
                on_iteration=None,
                error_csv_every: int = 0,
                diag_dir=None):
    """Optimize a Gaussian set (and head) on one scene.

    Returns (gaussians, head, list of LossReport).  ``on_iteration`` receives
    (t_iter, stage, payload) at the pre-mask and post-step stages, which the
    bitwise-divergence tests hook into.
    """
    from .synth import init_pixel_aligned

    config.validate()
    n_views = scene.n_views
    if gset is None:
        rng_init = np.random.default_rng(
            np.random.SeedSequence((scene.spec.seed, config.rng_seed, 7)))
        gset = init_pixel_aligned(scene, sigma_init=0.05, rng=rng_init)
    if head is None:
        head = mtc.ProjectionHead.create(
            gset.feat_dim, teacher.feat_dim, config.head_hidden_factor,
            rng=np.random.default_rng(
                np.random.SeedSequence((config.rng_seed, 13))))
    if mask_provider is None:
        mask_provider = mtc.OracleMaskProvider(teacher.object_masks)

    opt = make_optimizer(config, scene.scale)
    params = {g: getattr(gset, g) for g in GAUSSIAN_GROUPS}
    params.update(head.params())

    target_view = (n_views - 1) // 2
    other_views = [v for v in range(n_views) if v != target_view]
    lam1, lam2, lam_m = config.lambda1, config.lambda2, config.lambda_m
    reports: list = []
    n_iters = config.total_epochs * config.iters_per_epoch

    error_aware = config.egd_enabled and config.policy in ("egd", "fixed",
                                                           "step")
    for t_iter in range(n_iters):
        epoch = t_iter // config.iters_per_epoch
        act = activate(gset)
        preps = [raster.prepare(act, cam) for cam in scene.cameras]

        # full (unmasked) render of the source views; drives the per-splat
        # error, and doubles as the gradient render when nothing is masked
        full_colors = None
        renders = None
        if not config.egd_enabled:
            renders = [raster.composite(p, record_pairs=True) for p in preps]
            full_colors = [r.color for r in renders]
        elif error_aware or on_iteration is not None:
            full_colors = [raster.composite(p, with_feat=False).color
                           for p in preps]
        if on_iteration is not None:
            on_iteration(t_iter, "pre_mask", {
                "full_color": [c.copy() for c in full_colors]})

        retain = None
        opacity_adjust = None
        if config.egd_enabled:
            eta_t = egd.policy_eta(config.policy, epoch, config.total_epochs,
                                   config.eta_min, config.eta_max)
            if error_aware:
                E = egd.per_gaussian_error(
                    full_colors, list(scene.images),
                    gset.src_view, gset.src_pixel,
                    mean_channels=config.error_mean_channels)
                E_norm = egd.normalize_errors(
                    E, config.epsilon, per_view=config.per_view_error_norm,
                    src_view=gset.src_view)
            else:
                E = E_norm = np.zeros(gset.count)
            p_drop = egd.policy_probs(config.policy, E_norm, eta_t, config.beta)
            mask = egd.sample_retain_mask(
                p_drop, _iteration_rng(config.rng_seed, t_iter))
            if error_csv_every and diag_dir is not None \
                    and t_iter % error_csv_every == 0:
                egd.ErrorState(E, E_norm, p_drop, eta_t).write_csv(
                    f"{diag_dir}/error_state_{t_iter:05d}.csv")
            if config.policy == "opacity_zero":
                opacity_adjust = egd.opacity_zero_adjustment(
                    act.opacity, mask, eta_t)
            else:
                retain = mask

        if opacity_adjust is not None:
            # zeroing baseline: splats stay binned, opacities swapped in place;
            # d adj / d alpha is the survivor compensation (0 where clipped)
            opacity_chain = np.where(opacity_adjust < 0.999,
                                     opacity_adjust
                                     / np.maximum(act.opacity, 1e-12), 0.0)
            for p in preps:
                p.alpha = np.ascontiguousarray(opacity_adjust[p.order])
            renders = [raster.composite(p, record_pairs=True) for p in preps]
        elif renders is None:
            renders = [raster.composite(p, retain=retain, record_pairs=True)
                       for p in preps]

        # --- losses, upstream gradients, backward ---------------------------
        phase2 = config.mtc_enabled and epoch >= config.tau
        corr = None
        if phase2:
            proj_tar, _ = head.forward(
                renders[target_view].feat.reshape(-1, gset.feat_dim))
            err_map = mtc.semantic_error_map(
                renders[target_view].feat, teacher.teacher_feat[target_view],
                head, projected=proj_tar)
            prompt = mtc.max_error_prompt(err_map)
            corr = mask_provider.get(prompt, target_view, other_views)
            if corr is not None and diag_dir is not None and error_csv_every \
                    and t_iter % error_csv_every == 0:
                mtc.dump_correspondence(
                    f"{diag_dir}/correspondence_{t_iter:05d}.json",
                    t_iter, corr, other_views)

        report, up_grads, lp_grads, head_grads = compute_losses(
            gset, head, renders, scene.cameras, list(scene.images),
            teacher, config, phase2=phase2, corr=corr,
            target_view=target_view, other_views=other_views)
        if not np.isfinite(report.total):
            raise TrainAbort(t_iter, {
                "iteration": t_iter, "epoch": epoch,
                "report": report.__dict__,
                "non_finite_groups": [g for g in GAUSSIAN_GROUPS
                                      if not np.isfinite(params[g]).all()],
            })
        reports.append(report)

        grads = raster.ParamGrads.zeros(gset.count, gset.feat_dim)
        for v in range(n_views):
            gv = raster.composite_backward(
                preps[v], up_grads[v],
                retain=None if opacity_adjust is not None else retain,
                pair_alpha=renders[v].pair_alpha)
            grads += gv
        if opacity_adjust is not None:
            # the backward chained d alpha / d logit for the original opacity;
            # multiply in d adj / d alpha to account for the swap
            grads.opacity_logit = grads.opacity_logit * opacity_chain
        if lp_grads is not None:
            grads.feat += lp_grads[0]
            grads.mu += lp_grads[1]

        all_grads = {g: getattr(grads, g) for g in GAUSSIAN_GROUPS}
        all_grads.update(head_grads)
        opt.step(params, all_grads)

        if on_iteration is not None:
            on_iteration(t_iter, "post_step", {
                "params": {k: v.copy() for k, v in params.items()}})

    return gset, head, reports


def compute_losses(gset: GaussianSet, head, renders: list, cameras: list,
                   gt_images: list, teacher, config: TrainConfig,
                   phase2: bool = False, corr=None, target_view: int = 0,
                   other_views: list | None = None):
    """Assemble the composite loss and all upstream gradients for one step.

    Returns (LossReport, per-view RenderGrads, optional (feat, mu) gradients
    from the geometry prototype term, head parameter grads).  This is the
    whole differentiable path after rendering; the finite-difference checks
    drive it directly with a fixed correspondence.
    """
    n_views = len(renders)
    if other_views is None:
        other_views = [v for v in range(n_views) if v != target_view]
    lam1, lam2, lam_m = config.lambda1, config.lambda2, config.lambda_m

    color_val, g_colors, l1_v, perc_v = losses.photometric_loss_grad(
        [r.color for r in renders], gt_images, config.lambda_photo_perc)

    sem2d_total = 0.0
    g_feats = []
    head_grads_total = {k: 0.0 for k in HEAD_GROUPS}
    for v in range(n_views):
        s_val, g_f, hgrads = losses.sem2d_loss_grad(
            renders[v].feat, teacher.teacher_feat[v], head)
        sem2d_total += s_val
        g_feats.append(g_f)
        for k in HEAD_GROUPS:
            head_grads_total[k] = head_grads_total[k] + hgrads[k]

    loss_v = 0.0
    loss_p = 0.0
    lp_grads = None
    if phase2 and corr is not None:
        lv_val, g_tar, g_srcs, counted = mtc.view_prototype_loss_grad(
            renders[target_view].feat,
            [renders[v].feat for v in other_views], corr)
        if counted:
            loss_v = lv_val
            g_feats[target_view] = g_feats[target_view] + lam_m * g_tar
            for j, v in enumerate(other_views):
                g_feats[v] = g_feats[v] + lam_m * g_srcs[j]
        if config.use_lp:
            lp_feat_grad = np.zeros_like(gset.feat)
            lp_mu_grad = np.zeros_like(gset.mu)
            lp_vals = []
            for j, v in enumerate(other_views):
                m = corr.source_masks[j]
                sel = (gset.src_view == v) & m[gset.src_pixel[:, 0],
                                               gset.src_pixel[:, 1]]
                if sel.sum() < 2:
                    continue
                val, gf, gm = mtc.geometry_prototype_loss_grad(
                    gset.feat[sel], gset.mu[sel],
                    geo_aware=config.geo_aware,
                    raw_feats=config.lp_raw_feats)
                lp_vals.append(val)
                lp_feat_grad[sel] += gf
                lp_mu_grad[sel] += gm
            if lp_vals:
                loss_p = float(np.mean(lp_vals))
                scale = lam1 * lam_m / len(lp_vals)
                lp_grads = (lp_feat_grad * scale, lp_mu_grad * scale)

    epoch_for_mix = config.tau if phase2 else 0
    sem_val = mtc.mixed_sem_loss(epoch_for_mix, config, sem2d_total,
                                 loss_v, loss_p)

    geo_val = 0.0
    g_depths = []
    for v in range(n_views):
        p_hat = losses.depth_to_points(renders[v].depth, cameras[v])
        gv, g_pts = losses.geo_loss_grad(p_hat, teacher.point_map[v],
                                         teacher.confidence[v])
        geo_val += gv
        g_depths.append(losses.depth_grad_from_points(g_pts, cameras[v]))

    total = losses.total_loss(color_val, sem_val, geo_val, lam1, lam2)
    report = LossReport(total=total, color_l1=l1_v, color_perceptual=perc_v,
                        sem_2d=sem2d_total, sem_3d_v=loss_v, sem_3d_p=loss_p,
                        geo=geo_val)
    up_grads = [raster.RenderGrads(color=g_colors[v],
                                   depth=lam2 * g_depths[v],
                                   feat=lam1 * g_feats[v])
                for v in range(n_views)]
    head_grads = {k: lam1 * head_grads_total[k] for k in HEAD_GROUPS}
    return report, up_grads, lp_grads, head_grads


def classify_features(feat_map: np.ndarray, head: mtc.ProjectionHead,
                      class_embed: np.ndarray) -> np.ndarray:
    """Nearest class embedding (cosine) of head-projected rendered features."""
    y, _ = head.forward(feat_map.reshape(-1, feat_map.shape[-1]))
    y = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    scores = y @ class_embed.T
    return scores.argmax(axis=1).reshape(feat_map.shape[:2])


def evaluate(gset: GaussianSet, head: mtc.ProjectionHead, scene: Scene,
             class_embed: np.ndarray, cameras=None, gt_images=None,
             gt_depth=None, gt_class=None, gt_valid=None,
             renormalize_depth: bool = False) -> dict:
    """Mask-free evaluation against ray-cast ground truth on held-out views.

    Returns mean metrics over views: psnr, ssim, rel, rmse, miou, macc.
    """
    from . import metrics as M

    if cameras is None:
        cameras = scene.heldout_cameras
        gt_images = scene.heldout_images
        gt_depth = scene.heldout_depth
        gt_class = scene.heldout_class
        gt_valid = scene.heldout_hit
    act = activate(gset)
    psnrs, ssims, rels, rmses, mious, maccs = [], [], [], [], [], []
    for i, cam in enumerate(cameras):
        out = raster.render(act, cam, renormalize_depth=renormalize_depth)
        psnrs.append(M.psnr(np.clip(out.color, 0, 1), gt_images[i]))
        ssims.append(M.ssim(np.clip(out.color, 0, 1), gt_images[i]))
        rel, rmse = M.depth_metrics(out.depth, gt_depth[i], gt_valid[i])
        rels.append(rel)
        rmses.append(rmse)
        pred = classify_features(out.feat, head, class_embed)
        miou, macc = M.seg_metrics(pred, gt_class[i], class_embed.shape[0])
        mious.append(miou)
        maccs.append(macc)
    return {
        "psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
        "rel": float(np.mean(rels)), "rmse": float(np.mean(rmses)),
        "miou": float(np.mean(mious)), "macc": float(np.mean(maccs)),
    }


def save_checkpoint(prefix, gset: GaussianSet, head: mtc.ProjectionHead,
                    state: dict) -> None:
    """Gaussian binary + raw f32 head weights + JSON state."""
    save_gaussians(f"{prefix}.gaussians.bin", gset)
    with open(f"{prefix}.head.bin", "wb") as f:
        for k in HEAD_GROUPS:
            f.write(np.ascontiguousarray(getattr(head, k), dtype="<f4").tobytes())
    meta = dict(state)
    meta["head_shapes"] = {k: list(getattr(head, k).shape) for k in HEAD_GROUPS}
    with open(f"{prefix}.state.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_checkpoint(prefix):
    gset = load_gaussians(f"{prefix}.gaussians.bin")
    with open(f"{prefix}.state.json") as f:
        meta = json.load(f)
    shapes = meta["head_shapes"]
    arrays = {}
    with open(f"{prefix}.head.bin", "rb") as f:
        for k in HEAD_GROUPS:
            n = int(np.prod(shapes[k]))
            arrays[k] = np.frombuffer(f.read(4 * n), dtype="<f4").astype(
                np.float64).reshape(shapes[k])
    head = mtc.ProjectionHead(**arrays)
    return gset, head, meta
