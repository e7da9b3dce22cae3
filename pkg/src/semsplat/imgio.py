"""Binary PPM (P6) and PFM image writers/readers for render dumps."""

from __future__ import annotations

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError("not a binary PPM")
        w, h = map(int, f.readline().split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pfm(path, image: np.ndarray) -> None:
    """Write a single-channel (H, W) or (H, W, 3) map as little-endian PFM.

    PFM stores rows bottom-to-top; a negative scale marks little-endian.
    """
    if image.ndim == 2:
        header = b"Pf"
        data = image[:, :, None]
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
        data = image
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {image.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError("not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        nch = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * nch * 4), dtype=dtype)
    data = data.reshape(h, w, nch)[::-1].astype(np.float64)
    return data[:, :, 0] if nch == 1 else data


def write_feature_pfms(prefix, feat: np.ndarray) -> list:
    """Write each channel of an (H, W, d) feature map as ``{prefix}_cNN.pfm``."""
    paths = []
    for j in range(feat.shape[2]):
        p = f"{prefix}_c{j:02d}.pfm"
        write_pfm(p, feat[:, :, j])
        paths.append(p)
    return paths
