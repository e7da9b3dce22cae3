"""Training losses: photometric, 2D semantic distillation, geometric teacher
alignment, and the composite objective.

Each loss has a value-only entry point plus a ``*_grad`` variant returning the
upstream gradients the training loop feeds back through the rasterizer.  The
perceptual photometric term is (1 - SSIM) / 2, a self-contained structural
dissimilarity standing in for a learned perceptual metric.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .core import Camera
from .metrics import ssim, ssim_with_grad


@dataclass
class LossReport:
    """Per-iteration loss decomposition; total recombines the parts."""

    total: float = 0.0
    color_l1: float = 0.0
    color_perceptual: float = 0.0
    sem_2d: float = 0.0
    sem_3d_v: float = 0.0
    sem_3d_p: float = 0.0
    geo: float = 0.0

    @staticmethod
    def csv_header() -> list:
        return ["iteration", "total", "color_l1", "color_perceptual",
                "sem_2d", "sem_3d_v", "sem_3d_p", "geo"]

    def csv_row(self, iteration: int) -> list:
        return [iteration, self.total, self.color_l1, self.color_perceptual,
                self.sem_2d, self.sem_3d_v, self.sem_3d_p, self.geo]


def write_loss_csv(path, reports: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LossReport.csv_header())
        for i, rep in enumerate(reports):
            w.writerow(rep.csv_row(i))


def write_loss_summary(path, reports: list) -> None:
    if reports:
        last = asdict(reports[-1])
        summary = {"iterations": len(reports), "final": last,
                   "min_total": min(r.total for r in reports)}
    else:
        summary = {"iterations": 0}
    with open(path, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)


def photometric_loss(rendered: list, gt: list,
                     perc_weight: float = 0.05) -> float:
    """Sum over views of mean-|diff| plus weighted (1 - SSIM) / 2."""
    return photometric_loss_grad(rendered, gt, perc_weight)[0]


def photometric_loss_grad(rendered: list, gt: list, perc_weight: float = 0.05):
    total = 0.0
    l1_total = 0.0
    perc_total = 0.0
    grads = []
    for img, ref in zip(rendered, gt):
        if img.shape != ref.shape:
            raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
        diff = img - ref
        l1 = float(np.mean(np.abs(diff)))
        s, gs = ssim_with_grad(img, ref)
        perc = (1.0 - s) / 2.0
        total += l1 + perc_weight * perc
        l1_total += l1
        perc_total += perc
        grads.append(np.sign(diff) / diff.size - 0.5 * perc_weight * gs)
    return total, grads, l1_total, perc_total


def _cos_rows(u: np.ndarray, v: np.ndarray, eps: float = 1e-12):
    """Row-wise cosine with zero-vector guard (cosine of zero defined as 0)."""
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    ok = (nu > eps) & (nv > eps)
    denom = np.where(ok, nu * nv, 1.0)
    c = np.where(ok, np.sum(u * v, axis=-1) / denom, 0.0)
    return c, nu, nv, ok


def sem2d_loss(f_hat: np.ndarray, f_tilde: np.ndarray, head) -> float:
    """Mean over pixels of 1 - cos(head(f_hat), f_tilde)."""
    y, _ = head.forward(f_hat.reshape(-1, f_hat.shape[-1]))
    c, _, _, _ = _cos_rows(y, f_tilde.reshape(-1, f_tilde.shape[-1]))
    return float(np.mean(1.0 - c))


def sem2d_loss_grad(f_hat: np.ndarray, f_tilde: np.ndarray, head):
    """Value, gradient on the rendered feature map, head parameter grads."""
    hw = f_hat.shape[:2]
    x = f_hat.reshape(-1, f_hat.shape[-1])
    t = f_tilde.reshape(-1, f_tilde.shape[-1])
    y, cache = head.forward(x)
    c, ny, nt, ok = _cos_rows(y, t)
    val = float(np.mean(1.0 - c))
    # d(1-c)/dy = -(t/(|y||t|) - c y/|y|^2), rows with zero norms get 0
    denom = np.where(ok, ny * nt, 1.0)[:, None]
    gy = -(t / denom - c[:, None] * y / np.where(ok, ny * ny, 1.0)[:, None])
    gy[~ok] = 0.0
    gy /= x.shape[0]
    gx, head_grads = head.backward(cache, gy)
    return val, gx.reshape(*hw, -1), head_grads


def geo_loss(p_hat: np.ndarray, p_tilde: np.ndarray,
             conf: np.ndarray) -> float:
    """Confidence-weighted mean pixel-aligned point distance, one view."""
    dist = np.linalg.norm(p_hat - p_tilde, axis=-1)
    return float(np.mean(conf * dist))


def geo_loss_grad(p_hat, p_tilde, conf):
    diff = p_hat - p_tilde
    dist = np.linalg.norm(diff, axis=-1)
    val = float(np.mean(conf * dist))
    g = (conf / np.maximum(dist, 1e-12))[..., None] * diff / dist.size
    return val, g


def depth_to_points(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Per-pixel world points from a rendered z-depth map."""
    return cam.unproject(depth)


def depth_grad_from_points(g_points: np.ndarray, cam: Camera) -> np.ndarray:
    """Chain point-map gradients back to the depth map (linear unprojection)."""
    dirs_world = cam.pixel_rays() @ cam.R     # R^T d per pixel
    return np.sum(g_points * dirs_world, axis=-1)


def total_loss(color: float, sem: float, geo: float,
               lambda1: float = 0.02, lambda2: float = 0.005) -> float:
    """Composite objective: color + lambda1 * sem + lambda2 * geo."""
    return color + lambda1 * sem + lambda2 * geo
