"""Shared domain types: Gaussian sets, cameras, render buffers, teacher bundles, config.

Gaussian parameters are stored pre-activation (logits / log-scales / raw
quaternions) so plain gradient descent keeps the activated values inside
their valid ranges.  ``activate`` maps the raw storage to the constrained
parameterization used by the renderer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"EGSP"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Raised when a config or input violates a documented precondition."""


@dataclass
class GaussianSet:
    """Flat per-Gaussian parameter arrays plus pixel-alignment bookkeeping.

    Every Gaussian is tied to exactly one source pixel: ``src_view[k]`` and
    ``src_pixel[k] = (row, col)`` identify it.  Training masks Gaussians but
    never deletes them, so the (src_view, src_pixel) bijection set up at
    initialization survives the whole run.
    """

    mu: np.ndarray            # (N, 3) world-space centers
    log_scale: np.ndarray     # (N, 3) log of per-axis scales
    rot: np.ndarray           # (N, 4) quaternion (w, x, y, z), normalized on read
    opacity_logit: np.ndarray  # (N,)   sigmoid -> opacity in (0, 1)
    color_logit: np.ndarray   # (N, 3) sigmoid -> rgb in (0, 1)
    feat: np.ndarray          # (N, d) semantic embedding, unconstrained
    src_view: np.ndarray      # (N,)   int source view index
    src_pixel: np.ndarray     # (N, 2) int (row, col) in the source view

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feat.shape[1]

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, f).copy() for f in _FIELD_ORDER))

    def validate(self) -> None:
        n = self.count
        shapes = {
            "mu": (n, 3), "log_scale": (n, 3), "rot": (n, 4),
            "opacity_logit": (n,), "color_logit": (n, 3),
            "feat": (n, self.feat_dim), "src_view": (n,), "src_pixel": (n, 2),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ConfigError(f"GaussianSet.{name}: shape {got}, expected {want}")


_FIELD_ORDER = ("mu", "log_scale", "rot", "opacity_logit", "color_logit",
                "feat", "src_view", "src_pixel")


@dataclass
class ActivatedGaussians:
    """Constrained Gaussian parameters ready for rendering."""

    mu: np.ndarray       # (N, 3)
    scale: np.ndarray    # (N, 3) positive
    quat: np.ndarray     # (N, 4) unit-norm
    rotmat: np.ndarray   # (N, 3, 3) rotation matrices of quat
    opacity: np.ndarray  # (N,) in (0, 1)
    color: np.ndarray    # (N, 3) in (0, 1)
    feat: np.ndarray     # (N, d)
    rot_raw_norm: np.ndarray | None = None  # (N,) pre-normalization quat norms

    @property
    def count(self) -> int:
        return self.mu.shape[0]


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def activate(gset: GaussianSet) -> ActivatedGaussians:
    """Map raw storage to constrained parameters (exp / sigmoid / quat-normalize).

    Rejects non-finite input with the index of the first offending Gaussian.
    """
    for name in ("mu", "log_scale", "rot", "opacity_logit", "color_logit", "feat"):
        arr = getattr(gset, name)
        bad = ~np.isfinite(arr).reshape(gset.count, -1).all(axis=1)
        if bad.any():
            idx = int(np.argmax(bad))
            raise ConfigError(f"non-finite {name} at Gaussian index {idx}")
    norm = np.linalg.norm(gset.rot, axis=1, keepdims=True)
    if (norm == 0).any():
        idx = int(np.argmax(norm[:, 0] == 0))
        raise ConfigError(f"zero quaternion at Gaussian index {idx}")
    quat = gset.rot / norm
    return ActivatedGaussians(
        mu=np.asarray(gset.mu, dtype=np.float64),
        scale=np.exp(np.asarray(gset.log_scale, dtype=np.float64)),
        quat=quat,
        rotmat=quat_to_rotmat(quat),
        opacity=sigmoid(gset.opacity_logit),
        color=sigmoid(gset.color_logit),
        feat=np.asarray(gset.feat, dtype=np.float64),
        rot_raw_norm=norm[:, 0],
    )


def check_pixel_alignment(gset: GaussianSet, view_shapes: list[tuple[int, int]]) -> None:
    """Assert (src_view, src_pixel) is a bijection onto all pixels of all views."""
    total = sum(h * w for h, w in view_shapes)
    if gset.count != total:
        raise ConfigError(f"count {gset.count} != total pixels {total}")
    keys = set()
    for v, (r, c) in zip(gset.src_view, gset.src_pixel):
        v = int(v)
        if v < 0 or v >= len(view_shapes):
            raise ConfigError(f"src_view {v} out of range")
        h, w = view_shapes[v]
        if not (0 <= r < h and 0 <= c < w):
            raise ConfigError(f"src_pixel {(int(r), int(c))} outside view {v}")
        keys.add((v, int(r), int(c)))
    if len(keys) != total:
        raise ConfigError("pixel alignment is not a bijection (duplicate pixels)")


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray      # (3, 3) world -> camera rotation
    t: np.ndarray      # (3,) translation, x_cam = R @ x_world + t
    width: int
    height: int
    near: float
    far: float

    def validate(self) -> None:
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6:
            raise ConfigError(f"camera rotation not orthonormal (err {err:.2e})")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise ConfigError("camera rotation must have det +1")
        if not (0 < self.near < self.far):
            raise ConfigError("require 0 < near < far")

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions per pixel, (H, W, 3), z component 1."""
        r, c = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.stack([(c - self.cx) / self.fx, (r - self.cy) / self.fy,
                      np.ones_like(c, dtype=np.float64)], axis=-1)
        return d

    def unproject(self, depth: np.ndarray) -> np.ndarray:
        """Per-pixel world points from a z-depth map, (H, W, 3)."""
        p_cam = self.pixel_rays() * depth[..., None]
        return (p_cam - self.t) @ self.R   # R^T (p_cam - t), batched

    def project_points(self, pts_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) to pixel coords (u, v) and camera-space z."""
        p = pts_world @ self.R.T + self.t
        z = p[..., 2]
        u = self.fx * p[..., 0] / z + self.cx
        v = self.fy * p[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z


@dataclass
class RenderOutput:
    """Per-view render buffers: color, z-depth, coverage, semantic features."""

    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) blended camera-space z, not background-composited
    alpha: np.ndarray  # (H, W) in [0, 1]
    feat: np.ndarray   # (H, W, d)
    pair_alpha: np.ndarray | None = None  # recorded contributions for backward


@dataclass
class TeacherBundle:
    """Synthetic teacher supervision: features, point maps, confidence, masks.

    ``object_masks[k, v]`` is object k's mask in view v; the leading index is
    the cross-view object identity.
    """

    teacher_feat: np.ndarray   # (V, H, W, D)
    point_map: np.ndarray      # (V, H, W, 3)
    confidence: np.ndarray     # (V, H, W) in [0, 1]
    class_id: np.ndarray       # (V, H, W) int
    object_masks: np.ndarray   # (K_obj, V, H, W) bool
    class_embed: np.ndarray    # (K, D) unit rows used to synthesize teacher_feat
    heldout_feat: np.ndarray | None = None  # teacher run on the held-out views

    @property
    def feat_dim(self) -> int:
        return self.teacher_feat.shape[-1]

    def validate(self, n_classes: int) -> None:
        if self.class_id.max(initial=0) >= n_classes:
            raise ConfigError("class_id out of range")
        empty = ~self.object_masks.any(axis=(1, 2, 3))
        if empty.any():
            raise ConfigError(f"object {int(np.argmax(empty))} empty in every view")


@dataclass
class TrainConfig:
    """Schedule constants, loss weights, optimizer settings, ablation switches."""

    # dropout ratio schedule
    eta_min: float = 0.05
    eta_max: float = 0.2
    beta: float = 2.0          # focus exponent; no canonical value, must be > 1
    total_epochs: int = 100    # T
    iters_per_epoch: int = 20
    tau: int = 90              # curriculum switch epoch
    # loss weights
    lambda_m: float = 0.5      # mix weight on the 3D prototype losses
    lambda1: float = 0.02      # semantic weight in the composite loss
    lambda2: float = 0.005     # geometric weight in the composite loss
    lambda_photo_perc: float = 0.05  # structural-dissimilarity weight in photometric
    epsilon: float = 1e-6      # error-normalization guard
    # optimizer (adaptive gradient, per parameter group)
    lr_mu: float = 1.6e-3      # scaled by scene extent inside the trainer
    lr_log_scale: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-2
    lr_feat: float = 3e-2
    lr_head: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    # ablation switches
    egd_enabled: bool = True
    policy: str = "egd"        # egd | fixed | step | random | opacity_zero
    mtc_enabled: bool = True
    use_lp: bool = True        # geometry-aware prototype loss on/off
    geo_aware: bool = True     # False -> uniform prototype weights
    # interpretation flags (defaults follow the documented conventions)
    per_view_error_norm: bool = False
    error_mean_channels: bool = False
    renormalize_depth: bool = False
    lp_raw_feats: bool = False
    multi_prompt: bool = False
    head_hidden_factor: int = 2

    def validate(self) -> None:
        if not (0.0 <= self.eta_min <= self.eta_max <= 1.0):
            raise ConfigError("require 0 <= eta_min <= eta_max <= 1")
        if self.beta <= 1.0:
            raise ConfigError("require beta > 1")
        if self.total_epochs <= 0 or self.iters_per_epoch <= 0:
            raise ConfigError("epochs and iterations per epoch must be positive")
        if self.mtc_enabled and not (0 <= self.tau <= self.total_epochs):
            raise ConfigError("require 0 <= tau <= total_epochs")
        if self.policy not in ("egd", "fixed", "step", "random", "opacity_zero"):
            raise ConfigError(f"unknown policy {self.policy!r}")

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


# --- binary serialization -------------------------------------------------
#
# Layout: magic "EGSP", version u32, count u32, d u32, then contiguous
# little-endian f32 arrays in field order: mu, log_scale, rot, opacity_logit,
# color_logit, feat, src_view, src_pixel.

def save_gaussians(path, gset: GaussianSet) -> None:
    gset.validate()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, gset.count, gset.feat_dim))
        for name in _FIELD_ORDER:
            arr = np.ascontiguousarray(getattr(gset, name), dtype="<f4")
            f.write(arr.tobytes())


def load_gaussians(path) -> GaussianSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ConfigError(f"bad magic {magic!r}")
        version, count, d = struct.unpack("<III", f.read(12))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported version {version}")
        def read(shape):
            n = int(np.prod(shape))
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            return arr.astype(np.float64)
        gset = GaussianSet(
            mu=read((count, 3)),
            log_scale=read((count, 3)),
            rot=read((count, 4)),
            opacity_logit=read((count,)),
            color_logit=read((count, 3)),
            feat=read((count, d)),
            src_view=read((count,)).astype(np.int64),
            src_pixel=read((count, 2)).astype(np.int64),
        )
    gset.validate()
    return gset
