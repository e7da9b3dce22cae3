"""Evaluation metrics: PSNR, SSIM (with analytic backward), depth and
segmentation scores.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 on
valid windows only (no padding), which matches the classic reference
implementation on the interior region.
"""

from __future__ import annotations

import numpy as np

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def _gauss_kernel(width: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(width) - (width - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filt_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation along both image axes."""
    w = np.lib.stride_tricks.sliding_window_view(img, k.size, axis=0)
    out = w @ k
    w = np.lib.stride_tricks.sliding_window_view(out, k.size, axis=1)
    return w @ k


def _filt_adjoint(g: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    """Adjoint of ``_filt_valid``: zero-pad then correlate with flipped kernel."""
    pad = k.size - 1
    buf = np.zeros((g.shape[0] + 2 * pad, g.shape[1] + 2 * pad))
    buf[pad:pad + g.shape[0], pad:pad + g.shape[1]] = g
    out = _filt_valid(buf, k[::-1])
    assert out.shape == shape
    return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_channel(a, b, k):
    u = _filt_valid(a, k)
    v = _filt_valid(b, k)
    pa = _filt_valid(a * a, k)
    qb = _filt_valid(b * b, k)
    rab = _filt_valid(a * b, k)
    sx = pa - u * u
    sy = qb - v * v
    sxy = rab - u * v
    n1 = 2 * u * v + SSIM_C1
    n2 = 2 * sxy + SSIM_C2
    d1 = u * u + v * v + SSIM_C1
    d2 = sx + sy + SSIM_C2
    s = (n1 * n2) / (d1 * d2)
    return s, (u, v, n1, n2, d1, d2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid windows; channels averaged for (H, W, C) input."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    k = _gauss_kernel()
    vals = [np.mean(_ssim_channel(a[:, :, c], b[:, :, c], k)[0])
            for c in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM value plus d(ssim)/d(a); ``b`` is treated as constant."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
        b = b[:, :, None]
    k = _gauss_kernel()
    nch = a.shape[2]
    grad = np.zeros_like(a)
    vals = []
    for c in range(nch):
        ac = a[:, :, c]
        bc = b[:, :, c]
        s, (u, v, n1, n2, d1, d2) = _ssim_channel(ac, bc, k)
        vals.append(np.mean(s))
        npix = s.size * nch
        # partials w.r.t. the filtered moments (u, pa, rab)
        gs = np.ones_like(s) / npix
        gu = gs * (2 * v * s * (1 / n1 - 1 / n2) - 2 * u * s * (1 / d1 - 1 / d2))
        gpa = gs * (-s / d2)
        grab = gs * (2 * s / n2)
        grad[:, :, c] = (_filt_adjoint(gu, k, ac.shape)
                         + 2 * ac * _filt_adjoint(gpa, k, ac.shape)
                         + bc * _filt_adjoint(grab, k, ac.shape))
    val = float(np.mean(vals))
    return val, (grad[:, :, 0] if squeeze else grad)


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  valid: np.ndarray) -> tuple[float, float]:
    """(absolute relative error, RMSE) over the valid pixels."""
    valid = np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("empty valid mask")
    p = np.asarray(pred, np.float64)[valid]
    g = np.asarray(gt, np.float64)[valid]
    if (g <= 0).any():
        raise ValueError("ground-truth depth must be positive on valid pixels")
    rel = float(np.mean(np.abs(p - g) / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    return rel, rmse


def seg_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int,
                include_absent: bool = False) -> tuple[float, float]:
    """(mIoU, mAcc) averaged over classes present in gt.

    ``include_absent=True`` counts classes missing from gt as IoU/acc 0.
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.max(initial=0) >= n_classes or gt.max(initial=0) >= n_classes:
        raise ValueError("class id out of range")
    conf = np.bincount(gt * n_classes + pred,
                       minlength=n_classes * n_classes).reshape(n_classes,
                                                                n_classes)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    present = gt_count > 0
    iou = np.zeros(n_classes)
    acc = np.zeros(n_classes)
    nz = union > 0
    iou[nz] = tp[nz] / union[nz]
    acc[present] = tp[present] / gt_count[present]
    if include_absent:
        return float(iou.mean()), float(acc.mean())
    return float(iou[present].mean()), float(acc[present].mean())
