"""Error-aware capacity control: per-splat reconstruction error, normalized
error, error-decreasing dropout probability, cosine-cycle ratio schedule,
Bernoulli retain masks, and the baseline policies used for ablations.

All functions are pure; randomness enters only through an explicit generator,
so identical seeds reproduce identical masks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ConfigError

POLICIES = ("egd", "fixed", "step", "random", "opacity_zero")


@dataclass
class ErrorState:
    """Per-splat dropout bookkeeping for one iteration."""

    E: np.ndarray        # raw L1 reconstruction error at the aligned pixel
    E_norm: np.ndarray   # min-max normalized error in [0, 1]
    p_drop: np.ndarray   # dropout probability in [0, eta_t]
    eta_t: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["gaussian_id", "E", "E_norm", "p_drop"])
            for i in range(self.E.shape[0]):
                w.writerow([i, self.E[i], self.E_norm[i], self.p_drop[i]])


def per_gaussian_error(rendered: list, gt_images: list, src_view: np.ndarray,
                       src_pixel: np.ndarray,
                       mean_channels: bool = False) -> np.ndarray:
    """L1 color error at each splat's own source pixel.

    ``rendered`` must come from the full (unmasked) set so the error does not
    depend on the mask about to be sampled.
    """
    n_views = len(gt_images)
    if len(rendered) != n_views:
        raise ConfigError("need one render per source view")
    err_maps = []
    for v in range(n_views):
        if rendered[v].shape != gt_images[v].shape:
            raise ConfigError(f"render/gt shape mismatch in view {v}")
        e = np.abs(rendered[v] - gt_images[v])
        err_maps.append(e.mean(axis=-1) if mean_channels else e.sum(axis=-1))
    if src_view.max(initial=-1) >= n_views:
        raise ConfigError("src_view out of range of rendered views")
    stack = np.stack(err_maps)
    return stack[src_view, src_pixel[:, 0], src_pixel[:, 1]]


def normalize_errors(E: np.ndarray, epsilon: float = 1e-6,
                     per_view: bool = False,
                     src_view: np.ndarray | None = None) -> np.ndarray:
    """Min-max normalization with an epsilon guard; global over all splats by
    default, per source view when ``per_view`` is set."""
    E = np.asarray(E, dtype=np.float64)
    if E.size == 0:
        raise ConfigError("empty error array")
    if not per_view:
        lo, hi = E.min(), E.max()
        return (E - lo) / (hi - lo + epsilon)
    if src_view is None:
        raise ConfigError("per-view normalization needs src_view")
    out = np.empty_like(E)
    for v in np.unique(src_view):
        m = src_view == v
        lo, hi = E[m].min(), E[m].max()
        out[m] = (E[m] - lo) / (hi - lo + epsilon)
    return out


def dropout_prob(E_norm: np.ndarray, eta_t: float, beta: float) -> np.ndarray:
    """p = eta_t * (1 - E_norm)^beta: low-error splats drop most often."""
    if beta <= 1.0:
        raise ConfigError("beta must be > 1")
    if not (0.0 <= eta_t <= 1.0):
        raise ConfigError("eta_t must lie in [0, 1]")
    return eta_t * np.power(1.0 - np.asarray(E_norm, dtype=np.float64), beta)


def eta_schedule(t: float, total: float, eta_min: float,
                 eta_max: float) -> float:
    """Cosine-cycle ratio: eta_min at the ends, eta_max at mid-training."""
    if total <= 0:
        raise ConfigError("total epochs must be positive")
    return float(eta_min + 0.5 * (eta_max - eta_min)
                 * (1.0 - np.cos(2.0 * np.pi * t / total)))


def sample_retain_mask(p_drop: np.ndarray, rng) -> np.ndarray:
    """Bernoulli retain mask: splat k stays iff xi_k > p_drop[k]."""
    p = np.asarray(p_drop, dtype=np.float64)
    if (p < 0).any() or (p > 1).any():
        raise ConfigError("probabilities must lie in [0, 1]")
    xi = rng.random(p.shape[0])
    return xi > p


def policy_eta(kind: str, t: float, total: float, eta_min: float,
               eta_max: float) -> float:
    """Ratio schedule per policy: cosine cycle, constant max, or step.

    Opacity-zeroing runs at the constant maximum ratio: the baseline it
    mirrors has no ratio regulation.
    """
    if kind in ("egd", "random"):
        return eta_schedule(t, total, eta_min, eta_max)
    if kind in ("fixed", "opacity_zero"):
        return float(eta_max)
    if kind == "step":
        return float(eta_min if t < total / 2 else eta_max)
    raise ConfigError(f"unknown policy kind {kind!r}")


def policy_probs(kind: str, E_norm: np.ndarray, eta_t: float,
                 beta: float) -> np.ndarray:
    """Per-splat drop probabilities: error-aware for the scheduled policies,
    error-agnostic (constant eta_t) for random and opacity-zeroing."""
    if kind in ("egd", "fixed", "step"):
        return dropout_prob(E_norm, eta_t, beta)
    if kind in ("random", "opacity_zero"):
        return np.full(E_norm.shape[0], float(eta_t))
    raise ConfigError(f"unknown policy kind {kind!r}")


def opacity_zero_adjustment(opacity: np.ndarray, retain: np.ndarray,
                            eta_t: float) -> np.ndarray:
    """Dropout applied by zeroing opacities instead of excluding splats.

    Dropped splats get opacity 0 (still occupying compositing slots);
    survivors are compensated by 1/(1 - eta_t) as in inverted dropout.  At
    inference nothing is rescaled, which is exactly the train/test mismatch
    this baseline is known for.
    """
    scale = 1.0 / max(1.0 - eta_t, 1e-6)
    return np.clip(opacity * retain * scale, 0.0, 0.999)
