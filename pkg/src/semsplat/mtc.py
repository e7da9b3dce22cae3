"""Mixed 2D/3D semantic curriculum: projection head, max-disagreement
prompting, cross-view mask correspondence, and prototype alignment losses.

Phase I distills per-pixel teacher features through a small trainable head;
phase II (from epoch ``tau``) adds object-level consistency terms built from a
single prompted cross-view correspondence per iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import _cos_rows


@dataclass
class ProjectionHead:
    """One-hidden-layer map from rendered feature dim to teacher dim.

    tanh nonlinearity keeps the map smooth, which the finite-difference
    gradient checks rely on.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def create(in_dim: int, out_dim: int, hidden_factor: int = 2,
               rng=None) -> "ProjectionHead":
        rng = rng or np.random.default_rng(0)
        hidden = hidden_factor * out_dim
        # biases start slightly off zero: uncovered pixels render zero
        # features, and the cosine loss is singular at a zero projection
        return ProjectionHead(
            w1=rng.normal(0, 1.0 / np.sqrt(in_dim), (in_dim, hidden)),
            b1=0.05 * rng.normal(0, 1.0, hidden),
            w2=rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, out_dim)),
            b2=0.05 * rng.normal(0, 1.0, out_dim),
        )

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def forward(self, x: np.ndarray):
        h = np.tanh(x @ self.w1 + self.b1)
        y = h @ self.w2 + self.b2
        return y, (x, h)

    def backward(self, cache, gy: np.ndarray):
        x, h = cache
        gw2 = h.T @ gy
        gb2 = gy.sum(axis=0)
        gh = (gy @ self.w2.T) * (1.0 - h * h)
        gw1 = x.T @ gh
        gb1 = gh.sum(axis=0)
        gx = gh @ self.w1.T
        return gx, {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class ObjectCorrespondence:
    """A prompted object's masks across views."""

    target_mask: np.ndarray       # (H, W) bool
    source_masks: list            # bool masks aligned with source view ids
    prompt_pixel: tuple           # (row, col)
    object_id: int = -1


def semantic_error_map(f_hat: np.ndarray, f_tilde: np.ndarray, head,
                       projected: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel 1 - cos(head(f_hat), f_tilde); cosine of zero vectors is 0.

    ``projected`` short-circuits the head forward when the caller already has
    head(f_hat) for this view.
    """
    if projected is None:
        projected, _ = head.forward(f_hat.reshape(-1, f_hat.shape[-1]))
    c, _, _, _ = _cos_rows(projected.reshape(-1, f_tilde.shape[-1]),
                           f_tilde.reshape(-1, f_tilde.shape[-1]))
    return (1.0 - c).reshape(f_tilde.shape[:2])


def max_error_prompt(error_map: np.ndarray) -> tuple[int, int]:
    """Row-major argmax; ties break to the smallest linear index."""
    if error_map.size == 0:
        raise ValueError("empty error map")
    idx = int(np.argmax(error_map))
    return (idx // error_map.shape[1], idx % error_map.shape[1])


class OracleMaskProvider:
    """Returns the ground-truth object containing the prompt, across views.

    Call counting lets tests assert the provider is never touched in phase I.
    """

    def __init__(self, object_masks: np.ndarray):
        self.object_masks = object_masks      # (K, V, H, W)
        self.calls = 0

    def get(self, prompt_pixel, target_view: int,
            source_views: list) -> ObjectCorrespondence | None:
        self.calls += 1
        r, c = prompt_pixel
        masks = self.object_masks
        hits = np.nonzero(masks[:, target_view, r, c])[0]
        if hits.size == 0:
            return None                       # background or unlabeled prompt
        k = int(hits[0])
        return ObjectCorrespondence(
            target_mask=masks[k, target_view].copy(),
            source_masks=[masks[k, v].copy() for v in source_views],
            prompt_pixel=(int(r), int(c)),
            object_id=k,
        )


class PerturbedMaskProvider:
    """Oracle masks dilated (radius > 0) or eroded (radius < 0) to simulate
    segmentation artifacts."""

    def __init__(self, object_masks: np.ndarray, radius: int):
        self._oracle = OracleMaskProvider(object_masks)
        self.radius = radius

    @property
    def calls(self) -> int:
        return self._oracle.calls

    def get(self, prompt_pixel, target_view, source_views):
        corr = self._oracle.get(prompt_pixel, target_view, source_views)
        if corr is None or self.radius == 0:
            return corr
        st = np.ones((3, 3), dtype=bool)
        op = ndimage.binary_dilation if self.radius > 0 else ndimage.binary_erosion
        it = abs(self.radius)
        corr.target_mask = op(corr.target_mask, structure=st, iterations=it)
        corr.source_masks = [op(m, structure=st, iterations=it)
                             for m in corr.source_masks]
        return corr


def view_prototype_loss(f_hat_target: np.ndarray, f_hat_sources: list,
                        corr: ObjectCorrespondence) -> float:
    return view_prototype_loss_grad(f_hat_target, f_hat_sources, corr)[0]


def view_prototype_loss_grad(f_hat_target: np.ndarray, f_hat_sources: list,
                             corr: ObjectCorrespondence):
    """1 - cos between the target-region mean feature and the average of the
    source-region means.  Empty source masks drop out of the average; if all
    are empty (or the target is) the loss is skipped as exactly 0.

    Returns (value, grad on target map, list of grads on source maps).
    """
    d = f_hat_target.shape[-1]
    zero_t = np.zeros_like(f_hat_target)
    zeros_s = [np.zeros_like(f) for f in f_hat_sources]
    tm = corr.target_mask
    if not tm.any():
        return 0.0, zero_t, zeros_s, False
    used = [i for i, m in enumerate(corr.source_masks) if m.any()]
    if not used:
        return 0.0, zero_t, zeros_s, False

    u = f_hat_target[tm].mean(axis=0)
    means = [f_hat_sources[i][corr.source_masks[i]].mean(axis=0) for i in used]
    w = np.mean(means, axis=0)
    c, nu, nw, ok = _cos_rows(u[None], w[None])
    c = float(c[0])
    val = 1.0 - c
    if not ok[0]:
        return val, zero_t, zeros_s, True
    nu, nw = float(nu[0]), float(nw[0])
    gu = -(w / (nu * nw) - c * u / (nu * nu))
    gw = -(u / (nu * nw) - c * w / (nw * nw))
    gt = zero_t
    gt[tm] = gu / tm.sum()
    gs = zeros_s
    for j, i in enumerate(used):
        m = corr.source_masks[i]
        gs[i][m] = gw / (len(used) * m.sum())
    return val, gt, gs, True


def region_prototype(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """L2-normalize region embeddings (zero rows stay zero), return the mean
    as the prototype."""
    if feats.shape[0] == 0:
        raise ValueError("empty region")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    normed = np.where(norms > 1e-12, feats / np.maximum(norms, 1e-12), 0.0)
    return normed.mean(axis=0), normed


def _pairwise_dist(mus: np.ndarray) -> np.ndarray:
    """Exact pairwise Euclidean distances via the Gram expansion."""
    sq = np.sum(mus * mus, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (mus @ mus.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return d


def density_weights(mus: np.ndarray) -> np.ndarray:
    """Inverse mean-pairwise-distance weights, normalized to sum to 1."""
    n = mus.shape[0]
    if n == 0:
        raise ValueError("empty region")
    if n == 1:
        return np.ones(1)
    d = np.maximum(_pairwise_dist(mus).mean(axis=1), 1e-8)
    inv = 1.0 / d
    return inv / inv.sum()


def geometry_prototype_loss(feats: np.ndarray, mus: np.ndarray,
                            geo_aware: bool = True,
                            raw_feats: bool = False) -> float:
    val, _, _ = geometry_prototype_loss_grad(feats, mus, geo_aware, raw_feats)
    return val


def geometry_prototype_loss_grad(feats: np.ndarray, mus: np.ndarray,
                                 geo_aware: bool = True,
                                 raw_feats: bool = False):
    """Density-weighted squared distance of normalized region embeddings to
    their prototype.  Returns (value, dfeat, dmu); dmu is zero when the
    weights are uniform (geo_aware=False)."""
    n = feats.shape[0]
    if n < 2:
        raise ValueError("region needs at least 2 members")
    if raw_feats:
        normed = feats
    else:
        _, normed = region_prototype(feats)
    p = normed.mean(axis=0)
    resid = normed - p
    r = np.sum(resid * resid, axis=1)

    dmu = np.zeros_like(mus)
    if geo_aware:
        dist = _pairwise_dist(mus)
        dmean = dist.mean(axis=1)
        clamped = dmean < 1e-8
        d = np.maximum(dmean, 1e-8)
        inv = 1.0 / d
        ssum = inv.sum()
        w = inv / ssum
    else:
        w = np.full(n, 1.0 / n)
    val = float(np.sum(w * r))

    # dL/d normalized feats: through both the residual and the prototype mean
    gnormed = 2.0 * w[:, None] * resid - (2.0 / n) * np.sum(w[:, None] * resid,
                                                            axis=0)
    if raw_feats:
        gfeat = gnormed
    else:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        ok = norms[:, 0] > 1e-12
        gfeat = np.zeros_like(feats)
        if ok.any():
            nf = normed[ok]
            dots = np.sum(nf * gnormed[ok], axis=1, keepdims=True)
            gfeat[ok] = (gnormed[ok] - nf * dots) / norms[ok]

    if geo_aware:
        # dL/dmu_k = (1/n) sum_j (gd_k + gd_j) (mu_k - mu_j) / dist_kj, with
        # gd_k = (d_k^-2 / ssum)(L - r_k); evaluated with two matmuls instead
        # of materializing the (n, n, 3) difference tensor
        gd = np.where(clamped, 0.0, (inv * inv / ssum) * (val - r))
        winv = np.where(dist > 1e-12, 1.0 / np.where(dist > 1e-12, dist, 1.0),
                        0.0)
        coef = (gd[:, None] + gd[None, :]) * winv / n
        row = coef.sum(axis=1)
        dmu = row[:, None] * mus - coef @ mus
    return val, gfeat, dmu


def mixed_sem_loss(t: int, config, loss_2d: float, loss_v: float,
                   loss_p: float) -> float:
    """Curriculum mixing: phase I returns the 2D term; from epoch tau the 3D
    prototype terms join with weight lambda_m."""
    if config.mtc_enabled and t >= config.tau:
        return loss_2d + config.lambda_m * (loss_v + loss_p)
    return loss_2d


def mask_to_rle(mask: np.ndarray) -> list:
    """Row-major run-length encoding: flat [start, length, ...] of True runs."""
    flat = mask.ravel()
    edges = np.diff(flat.astype(np.int8))
    starts = np.nonzero(edges == 1)[0] + 1
    ends = np.nonzero(edges == -1)[0] + 1
    if flat[0]:
        starts = np.concatenate([[0], starts])
    if flat[-1]:
        ends = np.concatenate([ends, [flat.size]])
    out = []
    for s, e in zip(starts, ends):
        out.extend([int(s), int(e - s)])
    return out


def rle_to_mask(rle: list, shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    for s, ln in zip(rle[::2], rle[1::2]):
        flat[s:s + ln] = True
    return flat.reshape(shape)


def dump_correspondence(path, iteration: int, corr: ObjectCorrespondence,
                        source_views: list) -> None:
    rec = {
        "iteration": iteration,
        "object_id": corr.object_id,
        "prompt_pixel": list(corr.prompt_pixel),
        "target": {"shape": list(corr.target_mask.shape),
                   "rle": mask_to_rle(corr.target_mask)},
        "sources": [{"view": int(v), "shape": list(m.shape),
                     "rle": mask_to_rle(m)}
                    for v, m in zip(source_views, corr.source_masks)],
    }
    with open(path, "w") as f:
        json.dump(rec, f, sort_keys=True)
