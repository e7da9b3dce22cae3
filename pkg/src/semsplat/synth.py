"""Procedural room scenes with ray-cast ground truth and synthetic teachers.

Ground truth comes from exact ray casting against analytic shapes (boxes,
spheres, axis-aligned rectangles), fully independent of the splat rasterizer.
World frame is z-up; cameras use x-right, y-down, z-forward.

Classes: 0 other/background, 1 wall, 2 floor, 3 ceiling, 4 chair, 5 table,
6 bed, 7 sofa.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (Camera, ConfigError, GaussianSet, TeacherBundle,
                   inverse_sigmoid)

CLASS_NAMES = ("other", "wall", "floor", "ceiling", "chair", "table", "bed", "sofa")

CLS_OTHER, CLS_WALL, CLS_FLOOR, CLS_CEILING = 0, 1, 2, 3
CLS_CHAIR, CLS_TABLE, CLS_BED, CLS_SOFA = 4, 5, 6, 7


@dataclass
class Shape:
    kind: str                # "box" | "sphere" | "plane"
    class_id: int
    color: np.ndarray        # (3,) base albedo in [0, 1]
    lo: np.ndarray | None = None      # box / plane bounds
    hi: np.ndarray | None = None
    center: np.ndarray | None = None  # sphere
    radius: float = 0.0
    axis: int = 2            # plane: fixed axis
    value: float = 0.0       # plane: coordinate on the fixed axis
    tex_u: np.ndarray | None = None   # (2, 3) world-space texture directions
    tex_phase: float = 0.0

    def texture_mod(self, points: np.ndarray, amp: float,
                    freq: float) -> np.ndarray:
        """World-space procedural brightness: a smooth sinusoidal pattern.

        Texture keeps depth photometrically observable inside regions, which
        flat colors cannot (any depth renders a flat patch equally well).
        """
        if amp <= 0 or self.tex_u is None:
            return np.ones(points.shape[:-1])
        a = np.sin(freq * points @ self.tex_u[0] + self.tex_phase)
        b = np.sin(freq * points @ self.tex_u[1])
        return 1.0 - amp * (0.5 + 0.5 * a * b)


@dataclass
class SceneSpec:
    """Procedural scene + teacher-corruption parameters (JSON-friendly)."""

    seed: int = 0
    room: tuple | None = (2.0, 2.0, 2.0)   # half-extents (x, y) and height z
    n_objects: int = 4
    n_classes: int = 8
    n_views: int = 2
    ring_radius: float = 1.4
    ring_arc_deg: float = 35.0   # source cameras spread over this arc
    ring_jitter: float = 0.05
    image_size: int = 64
    fov_deg: float = 70.0
    # surface texture (0 amplitude -> flat colors)
    texture_amp: float = 0.4
    texture_freq: float = 7.0
    # teacher corruption
    teacher_dim: int = 32
    feat_noise: float = 0.1        # sigma_f
    blob_rate: float = 0.3         # rho: target fraction of wrong-class pixels
    depth_noise: float = 0.02      # sigma_d, absolute scene units
    mask_perturb_radius: int = 0

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        spec = SceneSpec()
        for k, v in d.items():
            if not hasattr(spec, k):
                raise ConfigError(f"unknown SceneSpec field {k!r}")
            if k == "room" and v is not None:
                v = tuple(v)
            setattr(spec, k, v)
        return spec

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "room": list(self.room) if self.room else None,
            "n_objects": self.n_objects, "n_classes": self.n_classes,
            "n_views": self.n_views, "ring_radius": self.ring_radius,
            "ring_arc_deg": self.ring_arc_deg,
            "ring_jitter": self.ring_jitter, "image_size": self.image_size,
            "fov_deg": self.fov_deg, "texture_amp": self.texture_amp,
            "texture_freq": self.texture_freq,
            "teacher_dim": self.teacher_dim,
            "feat_noise": self.feat_noise, "blob_rate": self.blob_rate,
            "depth_noise": self.depth_noise,
            "mask_perturb_radius": self.mask_perturb_radius,
        }


@dataclass
class Scene:
    spec: SceneSpec
    shapes: list
    cameras: list            # source views
    images: np.ndarray       # (V, H, W, 3)
    depth: np.ndarray        # (V, H, W) z-depth, `far` where nothing is hit
    class_id: np.ndarray     # (V, H, W)
    hit: np.ndarray          # (V, H, W) bool
    object_masks: np.ndarray  # (K_obj, V, H, W); index = cross-view identity
    heldout_cameras: list
    heldout_images: np.ndarray
    heldout_depth: np.ndarray
    heldout_class: np.ndarray
    heldout_hit: np.ndarray
    scale: float             # median hit depth over source views

    @property
    def n_views(self) -> int:
        return len(self.cameras)


# --- ray casting ------------------------------------------------------------

def _ray_box(origin, dirs, lo, hi):
    """Slab intersection; returns (tmin, tmax, axis_min, axis_max, valid)."""
    inv = 1.0 / np.where(dirs == 0.0, 1e-30, dirs)
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    axis_min = np.argmax(tlo, axis=-1)
    axis_max = np.argmin(thi, axis=-1)
    tmin = np.max(tlo, axis=-1)
    tmax = np.min(thi, axis=-1)
    valid = tmax > np.maximum(tmin, 0.0)
    return tmin, tmax, axis_min, axis_max, valid


def _ray_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc) - radius * radius
    disc = b * b - 4 * a * c
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-6, t0, t1)
    return t, ok & (t > 1e-6)


def _ray_plane_rect(origin, dirs, axis, value, lo, hi):
    d = dirs[..., axis]
    t = (value - origin[axis]) / np.where(d == 0.0, 1e-30, d)
    p = origin + t[..., None] * dirs
    ok = t > 1e-6
    for ax in range(3):
        if ax == axis:
            continue
        ok &= (p[..., ax] >= lo[ax]) & (p[..., ax] <= hi[ax])
    return t, ok


def _cast_view(shapes, room_class_colors, cam: Camera, far: float,
               tex_amp: float = 0.0, tex_freq: float = 7.0):
    """Ray cast one view; returns color, depth, class, hit, per-shape masks."""
    H, W = cam.height, cam.width
    origin = -cam.R.T @ cam.t
    dirs = cam.pixel_rays() @ cam.R      # world-frame, camera-z component == 1

    depth = np.full((H, W), far)
    color = np.zeros((H, W, 3))
    cls = np.zeros((H, W), dtype=np.int64)
    shape_idx = np.full((H, W), -1, dtype=np.int64)

    for si, sh in enumerate(shapes):
        if sh.kind == "room":
            # camera sits inside: the visible surface is the exit face
            _, tmax, _, axis_max, valid = _ray_box(origin, dirs, sh.lo, sh.hi)
            t = tmax
            hit_ok = valid & (t > 1e-6)
            exit_hi = np.take_along_axis(
                dirs, axis_max[..., None], axis=-1)[..., 0] > 0
            face_cls = np.where(axis_max == 2,
                                np.where(exit_hi, CLS_CEILING, CLS_FLOOR),
                                CLS_WALL)
            closer = hit_ok & (t < depth)
            depth[closer] = t[closer]
            shape_idx[closer] = si
            cls[closer] = face_cls[closer]
            p = origin + t[..., None] * dirs
            mod = sh.texture_mod(p, tex_amp, tex_freq)
            for face_cls_id, col in room_class_colors.items():
                m = closer & (face_cls == face_cls_id)
                color[m] = col * mod[m][:, None]
            continue
        if sh.kind == "box":
            tmin, _, _, _, valid = _ray_box(origin, dirs, sh.lo, sh.hi)
            t, hit_ok = tmin, valid & (tmin > 1e-6)
        elif sh.kind == "sphere":
            t, hit_ok = _ray_sphere(origin, dirs, sh.center, sh.radius)
        elif sh.kind == "plane":
            t, hit_ok = _ray_plane_rect(origin, dirs, sh.axis, sh.value, sh.lo, sh.hi)
        else:
            raise ConfigError(f"unknown shape kind {sh.kind!r}")
        closer = hit_ok & (t < depth)
        depth[closer] = t[closer]
        p = origin + t[..., None] * dirs
        mod = sh.texture_mod(p, tex_amp, tex_freq)
        color[closer] = sh.color * mod[closer][:, None]
        cls[closer] = sh.class_id
        shape_idx[closer] = si

    hit = shape_idx >= 0
    return color, depth, cls, hit, shape_idx


def _arc_angles(spec: SceneSpec) -> np.ndarray:
    arc = np.radians(spec.ring_arc_deg)
    if spec.n_views == 1:
        return np.array([0.0])
    return arc * (np.arange(spec.n_views) / (spec.n_views - 1) - 0.5)


def _camera_at(spec: SceneSpec, ang: float, jitter: np.ndarray) -> Camera:
    H = W = spec.image_size
    fx = 0.5 * W / np.tan(np.radians(spec.fov_deg) / 2)
    height = spec.room[2] / 2 if spec.room else 1.0
    center = np.array([0.0, 0.0, height])
    pos = center + np.array([spec.ring_radius * np.cos(ang),
                             spec.ring_radius * np.sin(ang), 0.0]) + jitter
    fwd = center - pos
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    far = 4.0 * (np.linalg.norm(spec.room[:2]) + spec.ring_radius) \
        if spec.room else 10.0
    return Camera(fx=fx, fy=fx, cx=(W - 1) / 2, cy=(H - 1) / 2,
                  R=R, t=-R @ pos, width=W, height=H, near=0.1, far=far)


def _ring_cameras(spec: SceneSpec, rng) -> tuple[list, list]:
    """Source cameras on an arc looking at the room center, plus held-out
    cameras at the (jitter-free) midpoints between adjacent source angles."""
    angles = _arc_angles(spec)
    cams = [_camera_at(spec, a, rng.normal(0, spec.ring_jitter, 3))
            for a in angles]
    held = [_camera_at(spec, 0.5 * (a0 + a1), np.zeros(3))
            for a0, a1 in zip(angles[:-1], angles[1:])]
    return cams, held


def _sample_shapes(spec: SceneSpec, rng) -> tuple[list, dict]:
    def tex(rng):
        u = rng.normal(0, 1, (2, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return u, rng.uniform(0, 2 * np.pi)

    shapes = []
    room_colors = {}
    if spec.room is not None:
        ex, ey, h = spec.room
        u, ph = tex(rng)
        shapes.append(Shape(kind="room", class_id=CLS_WALL,
                            color=np.zeros(3),
                            lo=np.array([-ex, -ey, 0.0]),
                            hi=np.array([ex, ey, h]),
                            tex_u=u, tex_phase=ph))
        room_colors = {CLS_WALL: rng.uniform(0.55, 0.8, 3),
                       CLS_FLOOR: rng.uniform(0.3, 0.5, 3),
                       CLS_CEILING: rng.uniform(0.7, 0.85, 3)}
    obj_classes = [CLS_CHAIR, CLS_TABLE, CLS_BED, CLS_SOFA, CLS_OTHER]
    ex, ey, h = spec.room if spec.room else (2.0, 2.0, 2.0)
    # objects stay inside the camera ring with a safety margin so no surface
    # comes close to a pinhole (which would blow up its projected footprint)
    place_r = 0.45 * spec.ring_radius
    reach = 0.38 * spec.ring_radius
    for k in range(spec.n_objects):
        cls_id = obj_classes[k % len(obj_classes)]
        col = rng.uniform(0.2, 0.85, 3)
        ang = rng.uniform(0, 2 * np.pi)
        rad = place_r * np.sqrt(rng.uniform(0, 1))
        cx, cy = rad * np.cos(ang), rad * np.sin(ang)
        u, ph = tex(rng)
        if cls_id == CLS_OTHER and rng.random() < 0.6:
            r = rng.uniform(0.5, 1.0) * reach
            shapes.append(Shape(kind="sphere", class_id=cls_id, color=col,
                                center=np.array([cx, cy, rng.uniform(0.3, 0.6) * h]),
                                radius=r, tex_u=u, tex_phase=ph))
        else:
            sx, sy = rng.uniform(0.5, 1.0, 2) * reach
            sz = rng.uniform(0.25, 0.55) * h
            shapes.append(Shape(kind="box", class_id=cls_id, color=col,
                                lo=np.array([cx - sx, cy - sy, 0.0]),
                                hi=np.array([cx + sx, cy + sy, sz]),
                                tex_u=u, tex_phase=ph))
    return shapes, room_colors


def generate(spec: SceneSpec, max_attempts: int = 20) -> Scene:
    """Ray-cast a procedural scene; deterministic per spec.seed."""
    if spec.n_views < 2:
        raise ConfigError("need at least 2 views")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 11)))
    cams, held = _ring_cameras(spec, rng)
    far = cams[0].far

    for attempt in range(max_attempts):
        shapes, room_colors = _sample_shapes(spec, rng)
        views = [_cast_view(shapes, room_colors, cam, far,
                            spec.texture_amp, spec.texture_freq)
                 for cam in cams]
        sidx = np.stack([v[4] for v in views])
        obj_ids = [i for i, sh in enumerate(shapes) if sh.kind != "room"]
        visible_any = all((sidx == i).any() for i in obj_ids)
        per_cam_sees_object = all(
            np.isin(sidx[v], obj_ids).any() for v in range(len(cams))
        ) if obj_ids else True
        if visible_any and per_cam_sees_object:
            break
    else:
        raise ConfigError("degenerate spec: objects stay invisible "
                          f"after {max_attempts} attempts")

    held_views = [_cast_view(shapes, room_colors, cam, far,
                              spec.texture_amp, spec.texture_freq)
                  for cam in held]

    # per-shape masks become object masks; include room faces as objects so
    # every surface can be prompted
    mask_shapes = []
    if spec.room is not None:
        room_i = next(i for i, sh in enumerate(shapes) if sh.kind == "room")
        cls_stack = np.stack([v[2] for v in views])
        for face_cls in (CLS_WALL, CLS_FLOOR, CLS_CEILING):
            mask_shapes.append((sidx == room_i) & (cls_stack == face_cls))
    for i in obj_ids:
        mask_shapes.append(sidx == i)
    object_masks = (np.stack(mask_shapes)
                    if mask_shapes else np.zeros((0, len(cams),
                                                  spec.image_size,
                                                  spec.image_size), dtype=bool))
    object_masks = object_masks[object_masks.any(axis=(1, 2, 3))]

    depth = np.stack([v[1] for v in views])
    hit = np.stack([v[3] for v in views])
    scale = float(np.median(depth[hit])) if hit.any() else 1.0
    return Scene(
        spec=spec, shapes=shapes, cameras=cams,
        images=np.stack([v[0] for v in views]),
        depth=depth,
        class_id=np.stack([v[2] for v in views]),
        hit=hit,
        object_masks=object_masks,
        heldout_cameras=held,
        heldout_images=np.stack([v[0] for v in held_views]),
        heldout_depth=np.stack([v[1] for v in held_views]),
        heldout_class=np.stack([v[2] for v in held_views]),
        heldout_hit=np.stack([v[3] for v in held_views]),
        scale=scale,
    )


# --- synthetic teachers -----------------------------------------------------

def class_embeddings(n_classes: int, dim: int, rng) -> np.ndarray:
    """Seeded unit class embeddings with pairwise cosine < 0.5 (resampled)."""
    emb = rng.normal(0, 1, (n_classes, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    for _ in range(1000):
        cos = emb @ emb.T
        np.fill_diagonal(cos, 0.0)
        i, j = np.unravel_index(np.argmax(cos), cos.shape)
        if cos[i, j] < 0.5:
            return emb
        v = rng.normal(0, 1, dim)
        emb[j] = v / np.linalg.norm(v)
    raise ConfigError("could not find well-separated class embeddings")


def _corrupt_blobs(class_map: np.ndarray, rate: float, n_classes: int, rng):
    """Overwrite contiguous discs with a wrong class until ~rate is corrupted."""
    out = class_map.copy()
    if rate <= 0:
        return out
    H, W = class_map.shape
    target = rate * H * W
    corrupted = np.zeros((H, W), dtype=bool)
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    for _ in range(200):
        if corrupted.sum() >= target:
            break
        r0, c0 = rng.integers(0, H), rng.integers(0, W)
        rad = rng.integers(max(2, H // 16), max(3, H // 5))
        blob = (rr - r0) ** 2 + (cc - c0) ** 2 <= rad ** 2
        true_cls = int(class_map[r0, c0])
        wrong = int(rng.integers(0, n_classes - 1))
        if wrong >= true_cls:
            wrong += 1
        out[blob] = wrong
        corrupted |= blob
    return out


def make_teacher(scene: Scene, spec: SceneSpec | None = None) -> TeacherBundle:
    """Noisy teacher features / point maps / masks for one scene.

    Feature teacher: per-view class embeddings plus isotropic noise, with
    spatially coherent wrong-class blobs covering ~blob_rate of the pixels.
    Geometry teacher: ground-truth point maps plus 3D noise; confidence decays
    with the injected noise magnitude.
    """
    spec = spec or scene.spec
    V, H, W = scene.depth.shape
    D = spec.teacher_dim
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 23)))
    embed = class_embeddings(spec.n_classes, D, rng)

    def feat_for(class_map):
        teach_cls = _corrupt_blobs(class_map, spec.blob_rate,
                                   spec.n_classes, rng)
        f = embed[teach_cls] + spec.feat_noise * rng.normal(0, 1, (H, W, D))
        norm = np.linalg.norm(f, axis=-1, keepdims=True)
        return f / np.maximum(norm, 1e-12)

    teacher_feat = np.empty((V, H, W, D))
    point_map = np.empty((V, H, W, 3))
    confidence = np.empty((V, H, W))
    for v in range(V):
        teacher_feat[v] = feat_for(scene.class_id[v])
        pts = scene.cameras[v].unproject(scene.depth[v])
        if spec.depth_noise > 0:
            noise = rng.normal(0, spec.depth_noise, (H, W, 3))
            point_map[v] = pts + noise
            confidence[v] = np.exp(-np.linalg.norm(noise, axis=-1)
                                   / spec.depth_noise)
        else:
            point_map[v] = pts
            confidence[v] = 1.0

    # the 2D teacher also runs on the held-out views, so evaluation can
    # compare the trained field against the teacher on the same images
    heldout_feat = np.stack([feat_for(c) for c in scene.heldout_class]) \
        if len(scene.heldout_cameras) else None

    masks = scene.object_masks.copy()
    if spec.mask_perturb_radius:
        from scipy import ndimage
        op = ndimage.binary_dilation if spec.mask_perturb_radius > 0 \
            else ndimage.binary_erosion
        st = np.ones((3, 3), dtype=bool)
        for k in range(masks.shape[0]):
            for v in range(V):
                masks[k, v] = op(masks[k, v], structure=st,
                                 iterations=abs(spec.mask_perturb_radius))
    bundle = TeacherBundle(teacher_feat=teacher_feat, point_map=point_map,
                           confidence=confidence, class_id=scene.class_id.copy(),
                           object_masks=masks, class_embed=embed,
                           heldout_feat=heldout_feat)
    return bundle


def init_pixel_aligned(scene: Scene, sigma_init: float, feat_dim: int = 16,
                       rng=None) -> GaussianSet:
    """One Gaussian per source pixel, unprojected at noisy ground-truth depth.

    ``sigma_init`` is a fraction of the scene scale (median hit depth); the
    initial isotropic scale is the world-space pixel footprint at that depth.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence((scene.spec.seed, 37)))
    V, H, W = scene.depth.shape
    n = V * H * W
    mus = []
    scales = []
    colors = []
    views = []
    pixels = []
    for v, cam in enumerate(scene.cameras):
        depth = scene.depth[v] + sigma_init * scene.scale * rng.normal(0, 1, (H, W))
        depth = np.maximum(depth, 2.0 * cam.near)
        mus.append(cam.unproject(depth).reshape(-1, 3))
        scales.append((depth / cam.fx).reshape(-1))
        colors.append(scene.images[v].reshape(-1, 3))
        rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        views.append(np.full(H * W, v, dtype=np.int64))
        pixels.append(np.column_stack([rr.ravel(), cc.ravel()]))
    mu = np.concatenate(mus)
    s = np.concatenate(scales)
    color = np.clip(np.concatenate(colors), 1e-3, 1 - 1e-3)
    gset = GaussianSet(
        mu=mu,
        log_scale=np.log(np.repeat(s[:, None], 3, axis=1)),
        rot=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        opacity_logit=np.zeros(n),
        color_logit=inverse_sigmoid(color),
        feat=0.05 * rng.normal(0, 1, (n, feat_dim)),
        src_view=np.concatenate(views),
        src_pixel=np.concatenate(pixels),
    )
    return gset
