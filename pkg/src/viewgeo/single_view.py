"""Texture-aware single-view geometric loss.

Three ingredients, evaluated on per-pixel fields of one view:

  * a trust-weighted L1 gap between a depth-derived normal map and the
    rendered normal map, restricted to texture-rich trusted pixels;
  * an orthogonality penalty between the gradient of the depth discrepancy
    and the in-plane normal components, on the same pixel set;
  * a color-similarity-weighted total-variation smoother on normals,
    restricted to texture-less pixels.

All reductions use compensated summation so tiled/parallel evaluation
orders cannot shift results beyond 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


KINK_EPS = 1e-12


def kink_sign(values: np.ndarray) -> np.ndarray:
    """sign() with a dead zone: anything within 1e-12 of a kink counts as at
    the kink (subgradient 0), so rounding residue at an exact minimum cannot
    fabricate unit-scale gradients."""
    return np.where(np.abs(values) <= KINK_EPS, 0.0, np.sign(values))


@dataclass(frozen=True)
class SvConfig:
    lam1: float = 0.05
    lam2: float = 0.01
    theta: float = 0.8
    percentile: float = 75.0

    def __post_init__(self):
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if not 0.0 < self.percentile < 100.0:
            raise ValueError(f"percentile must lie in (0, 100), got {self.percentile}")


@dataclass(frozen=True)
class SvLossReport:
    l_svn: float
    l_cross: float
    tv_normal: float
    l_svgeo: float
    n_rich_trust: int
    n_less: int

    def to_dict(self) -> dict:
        return {
            "l_svn": self.l_svn,
            "l_cross": self.l_cross,
            "tv_normal": self.tv_normal,
            "l_svgeo": self.l_svgeo,
            "n_rich_trust": self.n_rich_trust,
            "n_less": self.n_less,
        }


def discrepancy_field(depth: np.ndarray, depth_hat: np.ndarray) -> np.ndarray:
    """Signed per-pixel difference between rendered and plane-induced depth."""
    depth = np.asarray(depth, dtype=float)
    depth_hat = np.asarray(depth_hat, dtype=float)
    if depth.shape != depth_hat.shape:
        raise ValueError(f"field shapes differ: {depth.shape} vs {depth_hat.shape}")
    return depth - depth_hat


def _partial_x(field: np.ndarray) -> np.ndarray:
    h, w = field.shape
    out = np.zeros_like(field)
    if w < 2:
        return out
    out[:, 1:-1] = (field[:, 2:] - field[:, :-2]) / 2.0
    out[:, 0] = field[:, 1] - field[:, 0]
    out[:, -1] = field[:, -1] - field[:, -2]
    return out


def _partial_y(field: np.ndarray) -> np.ndarray:
    h, w = field.shape
    out = np.zeros_like(field)
    if h < 2:
        return out
    out[1:-1, :] = (field[2:, :] - field[:-2, :]) / 2.0
    out[0, :] = field[1, :] - field[0, :]
    out[-1, :] = field[-1, :] - field[-2, :]
    return out


def _adjoint_partial_x(coeff: np.ndarray) -> np.ndarray:
    """Scatter d(loss)/d(partial_x) back onto the underlying field."""
    h, w = coeff.shape
    out = np.zeros_like(coeff)
    if w < 2:
        return out
    out[:, 2:] += coeff[:, 1:-1] / 2.0
    out[:, :-2] -= coeff[:, 1:-1] / 2.0
    out[:, 1] += coeff[:, 0]
    out[:, 0] -= coeff[:, 0]
    out[:, -1] += coeff[:, -1]
    out[:, -2] -= coeff[:, -1]
    return out


def _adjoint_partial_y(coeff: np.ndarray) -> np.ndarray:
    h, w = coeff.shape
    out = np.zeros_like(coeff)
    if h < 2:
        return out
    out[2:, :] += coeff[1:-1, :] / 2.0
    out[:-2, :] -= coeff[1:-1, :] / 2.0
    out[1, :] += coeff[0, :]
    out[0, :] -= coeff[0, :]
    out[-1, :] += coeff[-1, :]
    out[-2, :] -= coeff[-1, :]
    return out


def _cross_values(delta: np.ndarray, normals: np.ndarray) -> np.ndarray:
    gx = _partial_x(delta)
    gy = _partial_y(delta)
    return gx * normals[..., 1] - gy * normals[..., 0]


def cross_loss(delta: np.ndarray, normals: np.ndarray, mask: np.ndarray) -> float:
    """Mean |∂δ/∂x · N_y - ∂δ/∂y · N_x| over the masked pixels.

    Partials are central differences, one-sided at borders. An empty mask
    yields 0.
    """
    delta = np.asarray(delta, dtype=float)
    normals = np.asarray(normals, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0
    values = np.abs(_cross_values(delta, normals))[mask]
    return math.fsum(values.tolist()) / count


def svn_loss(
    normals_from_depth: np.ndarray,
    normals: np.ndarray,
    weights: np.ndarray,
    delta: np.ndarray,
    mask: np.ndarray,
    lam1: float,
) -> float:
    """Trust-weighted L1 normal difference plus the orthogonality term.

    (1/|mask|) Σ W · ||N_d - N||_1 over masked pixels, plus lam1 times the
    cross loss on the same mask. Empty mask yields 0.
    """
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    cross = cross_loss(delta, normals, mask)
    if count == 0:
        return lam1 * cross
    l1 = np.abs(normals_from_depth - normals).sum(axis=-1)
    terms = (np.asarray(weights, dtype=float) * l1)[mask]
    return math.fsum(terms.tolist()) / count + lam1 * cross


def _tv_edge_terms(
    image: np.ndarray, normals: np.ndarray, less_mask: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-edge TV weights and normal differences for the vertical (to the
    pixel above) and horizontal (to the pixel on the left) neighbor terms."""
    image = np.asarray(image, dtype=float)
    normals = np.asarray(normals, dtype=float)
    wv = np.exp(-np.abs(image[1:, :] - image[:-1, :]).mean(axis=-1))
    wh = np.exp(-np.abs(image[:, 1:] - image[:, :-1]).mean(axis=-1))
    dv = normals[1:, :] - normals[:-1, :]
    dh = normals[:, 1:] - normals[:, :-1]
    return wv, wh, dv, dh


def tv_normal_loss(image: np.ndarray, normals: np.ndarray, less_mask: np.ndarray) -> float:
    """Color-weighted squared-difference smoother over texture-less pixels.

    Each texture-less pixel contributes exp(-|I - I_up|) ||N - N_up||² plus
    exp(-|I - I_left|) ||N - N_left||², where |·| is the mean absolute RGB
    difference; pixels on the top row or left column contribute only the
    terms that exist. Normalized by the texture-less pixel count; 0 when
    that count is 0.
    """
    less_mask = np.asarray(less_mask, dtype=bool)
    count = int(less_mask.sum())
    if count == 0:
        return 0.0
    wv, wh, dv, dh = _tv_edge_terms(image, normals, less_mask)
    vert = wv * (dv**2).sum(axis=-1)
    horz = wh * (dh**2).sum(axis=-1)
    terms = np.concatenate([vert[less_mask[1:, :]], horz[less_mask[:, 1:]]])
    return math.fsum(terms.tolist()) / count


def svgeo_loss(
    image: np.ndarray,
    normals_from_depth: np.ndarray,
    normals: np.ndarray,
    weights: np.ndarray,
    delta: np.ndarray,
    rich_trust_mask: np.ndarray,
    less_mask: np.ndarray,
    cfg: SvConfig,
) -> SvLossReport:
    """Assemble the full single-view loss and its term breakdown."""
    shapes = {
        np.asarray(delta).shape,
        np.asarray(weights).shape,
        np.asarray(rich_trust_mask).shape,
        np.asarray(less_mask).shape,
        np.asarray(normals).shape[:2],
        np.asarray(normals_from_depth).shape[:2],
        np.asarray(image).shape[:2],
    }
    if len(shapes) != 1:
        raise ValueError(f"inconsistent field shapes: {sorted(shapes)}")
    l_cross = cross_loss(delta, normals, rich_trust_mask)
    l_svn = svn_loss(normals_from_depth, normals, weights, delta, rich_trust_mask, cfg.lam1)
    tv = tv_normal_loss(image, normals, less_mask)
    return SvLossReport(
        l_svn=l_svn,
        l_cross=l_cross,
        tv_normal=tv,
        l_svgeo=l_svn + cfg.lam2 * tv,
        n_rich_trust=int(np.asarray(rich_trust_mask, dtype=bool).sum()),
        n_less=int(np.asarray(less_mask, dtype=bool).sum()),
    )


def svgeo_gradients(
    image: np.ndarray,
    normals_from_depth: np.ndarray,
    normals: np.ndarray,
    weights: np.ndarray,
    delta: np.ndarray,
    rich_trust_mask: np.ndarray,
    less_mask: np.ndarray,
    cfg: SvConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact partials of the single-view loss w.r.t. normals and discrepancy.

    Weights, masks, and the depth-derived normals are held fixed; the
    subgradient at the L1 and absolute-value kinks is 0 (with a 1e-12 dead
    zone, see kink_sign). Returns (d/dN, d/dδ).
    """
    normals = np.asarray(normals, dtype=float)
    delta = np.asarray(delta, dtype=float)
    mask = np.asarray(rich_trust_mask, dtype=bool)
    less_mask = np.asarray(less_mask, dtype=bool)
    grad_n = np.zeros_like(normals)
    grad_delta = np.zeros_like(delta)

    count = int(mask.sum())
    if count:
        # L1 normal-difference term.
        sgn = kink_sign(np.asarray(normals_from_depth, dtype=float) - normals)
        grad_n -= (np.asarray(weights, dtype=float) * mask)[..., None] * sgn / count

        # Orthogonality term, weight lam1 inside the single-view normal loss.
        gx = _partial_x(delta)
        gy = _partial_y(delta)
        cross = gx * normals[..., 1] - gy * normals[..., 0]
        coeff = np.where(mask, kink_sign(cross), 0.0) * (cfg.lam1 / count)
        grad_n[..., 1] += coeff * gx
        grad_n[..., 0] -= coeff * gy
        grad_delta += _adjoint_partial_x(coeff * normals[..., 1])
        grad_delta -= _adjoint_partial_y(coeff * normals[..., 0])

    n_less = int(less_mask.sum())
    if n_less and cfg.lam2 != 0.0:
        wv, wh, dv, dh = _tv_edge_terms(image, normals, less_mask)
        scale = 2.0 * cfg.lam2 / n_less
        vert = scale * (wv * less_mask[1:, :])[..., None] * dv
        grad_n[1:, :] += vert
        grad_n[:-1, :] -= vert
        horz = scale * (wh * less_mask[:, 1:])[..., None] * dh
        grad_n[:, 1:] += horz
        grad_n[:, :-1] -= horz

    return grad_n, grad_delta
