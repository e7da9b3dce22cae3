"""Differentiable splat rasterizer: projection, binning, alpha compositing.

Conventions
-----------
* Pixel (row r, col c) has screen coordinates (x=c, y=r); the principal point
  (cx, cy) lives in the same units.
* Splats composite front to back in ascending camera depth; depth ties break
  by Gaussian index (stable sort).
* A splat contributes to the pixels inside its screen-space bounding box of
  half-width ``radius + 1`` px, radius = 3 sqrt(max eigenvalue of cov2d);
  contributions outside the box are truncated to zero.
* ``retain``-masked and invisible splats take part in neither compositing nor
  gradient flow.

``prepare`` runs projection plus per-pixel binning once; the composite
entry points reuse it, which is what the training loop does (error render,
masked render, backward all share one preparation per view per iteration).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ActivatedGaussians, Camera, RenderOutput
from . import kernels

LOWPASS = 0.3       # px^2 added to cov2d diagonal
BBOX_MARGIN = 1.0   # px added to the 3-sigma bounding box
GUARD_BAND = 0.4    # center cull margin as a fraction of the image size


@dataclass
class Splat2D:
    """Screen-space splats (struct of arrays) plus visibility flags."""

    mean2d: np.ndarray     # (N, 2) pixel coords (u, v)
    cov2d: np.ndarray      # (N, 2, 2) regularized screen-space covariance
    depth_cam: np.ndarray  # (N,) camera-space z
    radius: np.ndarray     # (N,) 3 sigma in pixels
    visible: np.ndarray    # (N,) bool
    x_cam: np.ndarray      # (N, 3) camera-frame centers (kept for backward)
    cov_world: np.ndarray  # (N, 3, 3)


@dataclass
class RenderGrads:
    """Upstream gradients on the render buffers; None means zero."""

    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    alpha: np.ndarray | None = None
    feat: np.ndarray | None = None


@dataclass
class ParamGrads:
    """Gradients w.r.t. the raw (pre-activation) Gaussian parameters."""

    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: np.ndarray
    color_logit: np.ndarray
    feat: np.ndarray

    def __iadd__(self, other: "ParamGrads") -> "ParamGrads":
        for f in ("mu", "log_scale", "rot", "opacity_logit", "color_logit", "feat"):
            getattr(self, f).__iadd__(getattr(other, f))
        return self

    @staticmethod
    def zeros(n: int, d: int, dtype=np.float64) -> "ParamGrads":
        return ParamGrads(np.zeros((n, 3), dtype), np.zeros((n, 3), dtype),
                          np.zeros((n, 4), dtype), np.zeros(n, dtype),
                          np.zeros((n, 3), dtype), np.zeros((n, d), dtype))


@dataclass
class Prepared:
    """Projection + binning state shared by the composite passes."""

    act: ActivatedGaussians
    cam: Camera
    splats: Splat2D
    order: np.ndarray          # global indices, visible only, depth ascending
    offsets: np.ndarray        # pixel CSR offsets, (H*W + 1,)
    items: np.ndarray          # indices into the compacted (ordered) arrays
    mean2d: np.ndarray
    conic: np.ndarray          # (M, 3) symmetric storage xx, xy, yy
    alpha: np.ndarray
    color: np.ndarray
    depthc: np.ndarray
    feat: np.ndarray

    def live_from_retain(self, retain: np.ndarray | None) -> np.ndarray:
        if retain is None:
            return np.ones(self.order.size, dtype=np.uint8)
        retain = np.asarray(retain, dtype=bool)
        if retain.shape != (self.act.count,):
            raise ValueError(
                f"retain mask shape {retain.shape} != ({self.act.count},)")
        return retain[self.order].astype(np.uint8)


def project(act: ActivatedGaussians, cam: Camera) -> Splat2D:
    """EWA projection of 3D Gaussians to screen-space splats.

    cov2d = J W Sigma W^T J^T + LOWPASS * I with the first-order perspective
    Jacobian J.  Splats behind the near plane or entirely off-screen are
    flagged invisible; degenerate inputs never raise.
    """
    dtype = act.mu.dtype
    W = np.asarray(cam.R, dtype=dtype)
    x_cam = act.mu @ W.T + np.asarray(cam.t, dtype=dtype)
    z = x_cam[:, 2]
    safe_z = np.where(z > cam.near, z, dtype.type(1.0))
    u = cam.fx * x_cam[:, 0] / safe_z + cam.cx
    v = cam.fy * x_cam[:, 1] / safe_z + cam.cy

    M = act.rotmat * act.scale[:, None, :]        # R @ diag(s)
    cov_world = M @ np.swapaxes(M, 1, 2)
    A = np.matmul(W, cov_world) @ W.T
    # J rows are (p, 0, q) and (0, r, s); expand J A J^T componentwise
    p = cam.fx / safe_z
    q = -cam.fx * x_cam[:, 0] / safe_z**2
    r = cam.fy / safe_z
    s = -cam.fy * x_cam[:, 1] / safe_z**2
    a00, a01, a02 = A[:, 0, 0], A[:, 0, 1], A[:, 0, 2]
    a11, a12, a22 = A[:, 1, 1], A[:, 1, 2], A[:, 2, 2]
    cov2d = np.empty((act.count, 2, 2), dtype=dtype)
    cov2d[:, 0, 0] = p * p * a00 + 2 * p * q * a02 + q * q * a22 + LOWPASS
    cov2d[:, 0, 1] = cov2d[:, 1, 0] = (p * r * a01 + p * s * a02
                                       + q * r * a12 + q * s * a22)
    cov2d[:, 1, 1] = r * r * a11 + 2 * r * s * a12 + s * s * a22 + LOWPASS

    half_tr = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = half_tr + np.sqrt(
        np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2
                   + cov2d[:, 0, 1] ** 2, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

    visible = z > cam.near
    r_eff = radius + BBOX_MARGIN
    visible &= (u + r_eff >= -0.5) & (u - r_eff <= cam.width - 0.5)
    visible &= (v + r_eff >= -0.5) & (v - r_eff <= cam.height - 0.5)
    # guard-band frustum cull on the projected center: the first-order
    # perspective expansion is meaningless for splats far outside the image
    # (grazing rays blow up J), so treat them as off-screen
    gw, gh = GUARD_BAND * cam.width, GUARD_BAND * cam.height
    visible &= (u >= -gw) & (u <= cam.width - 1 + gw)
    visible &= (v >= -gh) & (v <= cam.height - 1 + gh)
    finite = np.isfinite(u) & np.isfinite(v) & np.isfinite(radius)
    finite &= np.isfinite(cov2d).all(axis=(1, 2))
    visible &= finite

    return Splat2D(mean2d=np.stack([u, v], axis=1), cov2d=cov2d, depth_cam=z,
                   radius=radius, visible=visible, x_cam=x_cam, cov_world=cov_world)


def prepare(act: ActivatedGaussians, cam: Camera) -> Prepared:
    """Project all Gaussians and bin the visible ones into per-pixel lists."""
    splats = project(act, cam)
    idx = np.nonzero(splats.visible)[0]
    order = idx[np.argsort(splats.depth_cam[idx], kind="stable")]

    u = splats.mean2d[order, 0]
    v = splats.mean2d[order, 1]
    r_eff = splats.radius[order] + BBOX_MARGIN
    x0 = np.clip(np.ceil(u - r_eff), 0, cam.width - 1).astype(np.int64)
    x1 = np.clip(np.floor(u + r_eff), 0, cam.width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v - r_eff), 0, cam.height - 1).astype(np.int64)
    y1 = np.clip(np.floor(v + r_eff), 0, cam.height - 1).astype(np.int64)
    offsets, items = kernels.build_pixel_csr(x0, x1, y0, y1, cam.height, cam.width)

    cov = splats.cov2d[order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det,
                      cov[:, 0, 0] / det], axis=1)
    return Prepared(act=act, cam=cam, splats=splats, order=order,
                    offsets=offsets, items=items,
                    mean2d=np.ascontiguousarray(splats.mean2d[order]),
                    conic=np.ascontiguousarray(conic),
                    alpha=np.ascontiguousarray(act.opacity[order]),
                    color=np.ascontiguousarray(act.color[order]),
                    depthc=np.ascontiguousarray(splats.depth_cam[order]),
                    feat=np.ascontiguousarray(act.feat[order]))


_EMPTY_FEAT_CACHE: dict[int, np.ndarray] = {}


def composite(prep: Prepared, retain: np.ndarray | None = None,
              background: np.ndarray | tuple = (0.0, 0.0, 0.0),
              with_feat: bool = True,
              record_pairs: bool = False,
              renormalize_depth: bool = False) -> RenderOutput:
    """Front-to-back composite of a prepared view.

    ``with_feat=False`` skips the semantic channel (capacity-control error
    pass); ``record_pairs=True`` stores per-pair contributions so the matching
    backward call can skip its forward replay.
    """
    dtype = prep.mean2d.dtype
    bg = np.asarray(background, dtype=dtype)
    cam = prep.cam
    H, W = cam.height, cam.width
    live = prep.live_from_retain(retain)
    d = prep.feat.shape[1] if with_feat else 0
    feat_in = prep.feat if with_feat else prep.feat[:, :0]
    out_color = np.zeros((H, W, 3), dtype)
    out_depth = np.zeros((H, W), dtype)
    out_alpha = np.zeros((H, W), dtype)
    out_feat = np.zeros((H, W, d), dtype)
    pair_a = np.zeros(prep.items.size if record_pairs else 0, dtype)
    kernels.composite_forward(prep.offsets, prep.items, live, prep.mean2d,
                              prep.conic, prep.alpha, prep.color, prep.depthc,
                              feat_in, bg, H, W,
                              out_color, out_depth, out_alpha, out_feat, pair_a)
    if renormalize_depth:
        out_depth = out_depth / np.maximum(out_alpha, 1e-8)
    return RenderOutput(color=out_color, depth=out_depth, alpha=out_alpha,
                        feat=out_feat,
                        pair_alpha=pair_a if record_pairs else None)


def composite_backward(prep: Prepared, grads: RenderGrads,
                       retain: np.ndarray | None = None,
                       background: np.ndarray | tuple = (0.0, 0.0, 0.0),
                       pair_alpha: np.ndarray | None = None) -> ParamGrads:
    """Exact gradients of the compositing formula w.r.t. raw parameters.

    Masked-out and invisible splats receive exactly zero gradients.  When
    ``pair_alpha`` (from the matching forward) is given, the per-pixel replay
    is skipped; the caller must pass contributions recorded under the same
    retain mask and opacities.
    """
    dtype = prep.mean2d.dtype
    bg = np.asarray(background, dtype=dtype)
    act, cam = prep.act, prep.cam
    H, W = cam.height, cam.width
    d = act.feat.shape[1]
    live = prep.live_from_retain(retain)
    zero2 = np.zeros((H, W), dtype)
    g_color = np.ascontiguousarray(grads.color, dtype=dtype) \
        if grads.color is not None else np.zeros((H, W, 3), dtype)
    g_depth = np.ascontiguousarray(grads.depth, dtype=dtype) \
        if grads.depth is not None else zero2
    g_alpha = np.ascontiguousarray(grads.alpha, dtype=dtype) \
        if grads.alpha is not None else zero2
    g_feat = np.ascontiguousarray(grads.feat, dtype=dtype) \
        if grads.feat is not None else np.zeros((H, W, d), dtype)

    m = prep.order.size
    gr_mean2d = np.zeros((m, 2), dtype)
    gr_conic = np.zeros((m, 3), dtype)
    gr_alpha = np.zeros(m, dtype)
    gr_color = np.zeros((m, 3), dtype)
    gr_depthc = np.zeros(m, dtype)
    gr_feat = np.zeros((m, d), dtype)
    if pair_alpha is not None:
        kernels.composite_backward_cached(
            prep.offsets, prep.items, pair_alpha, prep.mean2d, prep.conic,
            prep.alpha, prep.color, prep.depthc, prep.feat, bg, H, W,
            g_color, g_depth, g_alpha, g_feat,
            gr_mean2d, gr_conic, gr_alpha, gr_color, gr_depthc, gr_feat)
    else:
        kernels.composite_backward(prep.offsets, prep.items, live, prep.mean2d,
                                   prep.conic, prep.alpha, prep.color,
                                   prep.depthc, prep.feat, bg, H, W,
                                   g_color, g_depth, g_alpha, g_feat,
                                   gr_mean2d, gr_conic, gr_alpha, gr_color,
                                   gr_depthc, gr_feat)
    return _project_backward(act, cam, prep, gr_mean2d, gr_conic, gr_alpha,
                             gr_color, gr_depthc, gr_feat)


def render(act: ActivatedGaussians, cam: Camera,
           retain: np.ndarray | None = None,
           background: np.ndarray | tuple = (0.0, 0.0, 0.0),
           renormalize_depth: bool = False) -> RenderOutput:
    """Composite splats into color / depth / alpha / feature buffers.

    Depth is blended with the same alpha weights as color and is not
    background-composited; pass ``renormalize_depth=True`` to divide by the
    accumulated alpha (metric-study mode, not used for training).
    """
    return composite(prepare(act, cam), retain=retain, background=background,
                     renormalize_depth=renormalize_depth)


def render_backward(act: ActivatedGaussians, cam: Camera, grads: RenderGrads,
                    retain: np.ndarray | None = None,
                    background: np.ndarray | tuple = (0.0, 0.0, 0.0),
                    prep: Prepared | None = None) -> ParamGrads:
    """Gradients of ``render`` w.r.t. every raw Gaussian parameter group."""
    if prep is None:
        prep = prepare(act, cam)
    return composite_backward(prep, grads, retain=retain, background=background)


def _project_backward(act, cam, prep, gr_mean2d, gr_conic, gr_alpha,
                      gr_color, gr_depthc, gr_feat) -> ParamGrads:
    """Chain splat-space gradients through projection and activations."""
    order = prep.order
    n = act.count
    d = act.feat.shape[1]
    dtype = act.mu.dtype
    out = ParamGrads.zeros(n, d, dtype)
    if order.size == 0:
        return out
    splats = prep.splats
    x_cam = splats.x_cam[order]
    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    Wc = np.asarray(cam.R, dtype=dtype)

    # conic -> cov2d: Q = C^-1 so dL/dC = -Q Gq Q (all symmetric, 2x2)
    qa, qb, qc = prep.conic[:, 0], prep.conic[:, 1], prep.conic[:, 2]
    ga, gb, gc_ = gr_conic[:, 0], 0.5 * gr_conic[:, 1], gr_conic[:, 2]
    # rows of Gq Q
    m00 = ga * qa + gb * qb
    m01 = ga * qb + gb * qc
    m10 = gb * qa + gc_ * qb
    m11 = gb * qb + gc_ * qc
    gc00 = -(qa * m00 + qb * m10)
    gc01 = -(qa * m01 + qb * m11)
    gc11 = -(qb * m01 + qc * m11)
    t01 = 2.0 * gc01                 # both off-diagonal entries of Gc

    # cov2d = J A J^T + const with J rows (p, 0, q), (0, r, s)
    p = fx / z
    q = -fx * x / z**2
    r = fy / z
    s = -fy * y / z**2
    A = np.matmul(Wc, splats.cov_world[order]) @ Wc.T
    a00, a01, a02 = A[:, 0, 0], A[:, 0, 1], A[:, 0, 2]
    a11, a12, a22 = A[:, 1, 1], A[:, 1, 2], A[:, 2, 2]

    g_p = gc00 * (2 * p * a00 + 2 * q * a02) + t01 * (r * a01 + s * a02)
    g_q = gc00 * (2 * p * a02 + 2 * q * a22) + t01 * (r * a12 + s * a22)
    g_r = gc11 * (2 * r * a11 + 2 * s * a12) + t01 * (p * a01 + q * a12)
    g_s = gc11 * (2 * r * a12 + 2 * s * a22) + t01 * (p * a02 + q * a22)

    g_x = g_q * (-fx / z**2)
    g_y = g_s * (-fy / z**2)
    g_z = (g_p * (-fx / z**2) + g_q * (2 * fx * x / z**3)
           + g_r * (-fy / z**2) + g_s * (2 * fy * y / z**3))

    g_x += gr_mean2d[:, 0] * fx / z
    g_y += gr_mean2d[:, 1] * fy / z
    g_z += -gr_mean2d[:, 0] * fx * x / z**2 - gr_mean2d[:, 1] * fy * y / z**2
    g_z += gr_depthc        # depth channel blends camera z directly

    g_xyz = np.stack([g_x, g_y, g_z], axis=1)
    g_mu = g_xyz @ Wc

    # full-matrix gradient on A (off-diagonals split symmetrically)
    Ga = np.empty_like(A)
    Ga[:, 0, 0] = gc00 * p * p
    Ga[:, 0, 1] = Ga[:, 1, 0] = 0.5 * t01 * p * r
    Ga[:, 0, 2] = Ga[:, 2, 0] = 0.5 * (gc00 * 2 * p * q + t01 * p * s)
    Ga[:, 1, 1] = gc11 * r * r
    Ga[:, 1, 2] = Ga[:, 2, 1] = 0.5 * (t01 * q * r + gc11 * 2 * r * s)
    Ga[:, 2, 2] = gc00 * q * q + t01 * q * s + gc11 * s * s

    # A = W Sigma W^T; Sigma = M M^T with M = R diag(s)
    Gs = np.matmul(Wc.T, Ga) @ Wc
    Mm = act.rotmat[order] * act.scale[order][:, None, :]
    Gm = 2.0 * np.matmul(Gs, Mm)
    g_scale = np.einsum("nik,nik->nk", Gm, act.rotmat[order])
    Gr = Gm * act.scale[order][:, None, :]

    qn = act.quat[order]
    w, qx, qy, qz = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = Gr
    g_qw = (-2 * qz * G[:, 0, 1] + 2 * qy * G[:, 0, 2] + 2 * qz * G[:, 1, 0]
            - 2 * qx * G[:, 1, 2] - 2 * qy * G[:, 2, 0] + 2 * qx * G[:, 2, 1])
    g_qx = (2 * qy * G[:, 0, 1] + 2 * qz * G[:, 0, 2] + 2 * qy * G[:, 1, 0]
            - 4 * qx * G[:, 1, 1] - 2 * w * G[:, 1, 2] + 2 * qz * G[:, 2, 0]
            + 2 * w * G[:, 2, 1] - 4 * qx * G[:, 2, 2])
    g_qy = (-4 * qy * G[:, 0, 0] + 2 * qx * G[:, 0, 1] + 2 * w * G[:, 0, 2]
            + 2 * qx * G[:, 1, 0] + 2 * qz * G[:, 1, 2] - 2 * w * G[:, 2, 0]
            + 2 * qz * G[:, 2, 1] - 4 * qy * G[:, 2, 2])
    g_qz = (-4 * qz * G[:, 0, 0] - 2 * w * G[:, 0, 1] + 2 * qx * G[:, 0, 2]
            + 2 * w * G[:, 1, 0] - 4 * qz * G[:, 1, 1] + 2 * qy * G[:, 1, 2]
            + 2 * qx * G[:, 2, 0] + 2 * qy * G[:, 2, 1])
    g_qhat = np.stack([g_qw, g_qx, g_qy, g_qz], axis=1)
    # through q_hat = q / |q|
    rn = act.rot_raw_norm[order][:, None]
    g_q = (g_qhat - qn * np.sum(qn * g_qhat, axis=1, keepdims=True)) / rn

    # activation chains
    op = act.opacity[order]
    col = act.color[order]
    out.mu[order] = g_mu
    out.log_scale[order] = g_scale * act.scale[order]
    out.rot[order] = g_q
    out.opacity_logit[order] = gr_alpha * op * (1.0 - op)
    out.color_logit[order] = gr_color * col * (1.0 - col)
    out.feat[order] = gr_feat
    return out
