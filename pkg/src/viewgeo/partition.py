"""Texture partitioning and depth-discrepancy weighting.

An RGB image is split into texture-rich and texture-less regions by
thresholding the Sobel gradient magnitude of its luminance at a percentile
of the magnitude distribution. Independently, the gap between a rendered
depth map and its plane-induced counterpart becomes a confidence weight in
[0, 1], whose high end defines the trust region.
"""

from __future__ import annotations

import numpy as np

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


def _luminance(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    # Unweighted channel mean; no colorimetric assumption.
    return image.mean(axis=2)


def sobel_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical Sobel responses of the image luminance.

    Borders are handled by replicate padding so the outputs keep the input
    dimensions. Images smaller than 3x3 are rejected.
    """
    lum = _luminance(image)
    h, w = lum.shape
    if h < 3 or w < 3:
        raise ValueError(f"image must be at least 3x3, got {h}x{w}")
    padded = np.pad(lum, 1, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = np.einsum("ijkl,kl->ij", windows, SOBEL_X)
    gy = np.einsum("ijkl,kl->ij", windows, SOBEL_Y)
    return gx, gy


def gradient_magnitude(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    gx = np.asarray(gx, dtype=float)
    gy = np.asarray(gy, dtype=float)
    if gx.shape != gy.shape:
        raise ValueError(f"gradient shapes differ: {gx.shape} vs {gy.shape}")
    return np.hypot(gx, gy)


def percentile_threshold(field: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: sorted value at index ceil(p/100 * n) - 1."""
    if not 0.0 < p < 100.0:
        raise ValueError(f"percentile must lie in (0, 100), got {p}")
    values = np.asarray(field, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("cannot take a percentile of an empty field")
    idx = int(np.ceil(p / 100.0 * values.size)) - 1
    return float(np.sort(values)[idx])


def texture_partition(magnitude: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Split the domain into texture-rich (G >= tau) and texture-less pixels.

    Ties go to the rich side, so the two masks always partition the image.
    """
    if not np.isfinite(tau):
        raise ValueError("threshold must be finite")
    magnitude = np.asarray(magnitude, dtype=float)
    rich = magnitude >= tau
    return rich, ~rich


def depth_weight_map(depth: np.ndarray, depth_hat: np.ndarray) -> np.ndarray:
    """Turn per-pixel depth discrepancy into a confidence weight in [0, 1].

    W = 1 - |D - D_hat| / max|D - D_hat|. A zero-discrepancy field means full
    confidence everywhere (W = 1), avoiding the 0/0 case.
    """
    depth = np.asarray(depth, dtype=float)
    depth_hat = np.asarray(depth_hat, dtype=float)
    if depth.shape != depth_hat.shape:
        raise ValueError(f"field shapes differ: {depth.shape} vs {depth_hat.shape}")
    if not (np.all(np.isfinite(depth)) and np.all(np.isfinite(depth_hat))):
        raise ValueError("depth fields must be finite")
    delta = np.abs(depth - depth_hat)
    peak = delta.max()
    if peak == 0.0:
        return np.ones_like(delta)
    return 1.0 - delta / peak


def trust_region(weights: np.ndarray, theta: float) -> np.ndarray:
    """Pixels whose confidence weight reaches the threshold."""
    return np.asarray(weights, dtype=float) >= theta
