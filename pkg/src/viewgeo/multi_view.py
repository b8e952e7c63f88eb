"""Cross-view point-cloud consistency loss.

Both views' depth maps are lifted to 3D, the neighbor cloud is rigidly
moved into the current camera frame, and small surface patches around a
confidence-ranked pixel sample are compared through their PCA plane
normals. Curvature (the smallest-eigenvalue share of the patch covariance
spectrum) downweights unstable patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, Pose, backproject_depth, project_point, transform_points
from .partition import depth_weight_map

PATCH_SIZE = 3
CURVATURE_SHARPNESS = 10.0


class DegeneratePatchError(ValueError):
    """All patch points coincide; no plane can be fitted."""


@dataclass(frozen=True)
class MvConfig:
    beta: float = 0.5
    eps_d: float = 0.1
    gamma_fraction: float = 0.3
    s: int = 16
    lam3: float = 0.001

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.eps_d <= 0:
            raise ValueError("eps_d must be positive")
        if not 0.0 <= self.gamma_fraction < 1.0:
            raise ValueError(f"gamma_fraction must lie in [0, 1), got {self.gamma_fraction}")
        if self.s < 0:
            raise ValueError("sample count must be non-negative")


@dataclass(frozen=True)
class SampleSet:
    """Pixels chosen by the confidence-guided sampler, best first."""

    pixels: np.ndarray  # (K, 2) int array of (i, j)
    weights: np.ndarray  # (K,) matching confidence values, non-increasing

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class PatchAnalysis:
    normal: np.ndarray
    eigenvalues: np.ndarray  # descending, non-negative
    centroid: np.ndarray
    curvature_weight: float


@dataclass(frozen=True)
class MvLossReport:
    loss: float
    n_candidates: int
    n_sampled: int
    n_accepted_patches: int
    gamma: float
    mean_w_kappa: float
    empty: bool

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "n_candidates": self.n_candidates,
            "n_sampled": self.n_sampled,
            "n_accepted_patches": self.n_accepted_patches,
            "gamma": self.gamma,
            "mean_w_kappa": self.mean_w_kappa,
            "empty": self.empty,
        }


def fuse_weights(w_current: np.ndarray, w_neighbor: np.ndarray, beta: float) -> np.ndarray:
    """Convex combination beta * W_c + (1 - beta) * W_n."""
    w_current = np.asarray(w_current, dtype=float)
    w_neighbor = np.asarray(w_neighbor, dtype=float)
    if w_current.shape != w_neighbor.shape:
        raise ValueError(f"weight shapes differ: {w_current.shape} vs {w_neighbor.shape}")
    return beta * w_current + (1.0 - beta) * w_neighbor


def validity_mask(
    points: np.ndarray,
    src_pose: Pose,
    dst_pose: Pose,
    dst_cam: Camera,
    eps_d: float,
) -> np.ndarray:
    """Pixels whose 3D point is visible in the destination view.

    A point is valid when, expressed in the destination camera frame, it
    projects inside the image bounds with depth at least eps_d.
    """
    moved = transform_points(points, src_pose, dst_pose)
    u, v, z = project_point(moved, dst_cam)
    in_bounds = (u >= 0) & (u < dst_cam.width) & (v >= 0) & (v < dst_cam.height)
    return in_bounds & (z >= eps_d)


def candidate_set(
    w_avg: np.ndarray, valid: np.ndarray, gamma_fraction: float
) -> tuple[np.ndarray, float]:
    """Valid, confident, non-border pixels eligible for patch sampling.

    The confidence floor is gamma_fraction times the mean fused weight.
    Border pixels are excluded so every candidate owns a full 3x3 patch.
    Returns (mask, gamma).
    """
    w_avg = np.asarray(w_avg, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    if w_avg.shape != valid.shape:
        raise ValueError(f"field shapes differ: {w_avg.shape} vs {valid.shape}")
    gamma = float(gamma_fraction * w_avg.mean())
    mask = valid & (w_avg >= gamma)
    mask[0, :] = mask[-1, :] = False
    mask[:, 0] = mask[:, -1] = False
    return mask, gamma


def top_s_sample(candidates: np.ndarray, w_avg: np.ndarray, s: int) -> SampleSet:
    """The s highest-confidence candidate pixels.

    Ties are broken by row-major pixel order (smaller row, then smaller
    column first), making the selection fully deterministic.
    """
    candidates = np.asarray(candidates, dtype=bool)
    w_avg = np.asarray(w_avg, dtype=float)
    ii, jj = np.nonzero(candidates)
    if len(ii) == 0 or s == 0:
        return SampleSet(np.empty((0, 2), dtype=int), np.empty(0))
    ww = w_avg[ii, jj]
    order = np.lexsort((jj, ii, -ww))[: min(s, len(ii))]
    return SampleSet(np.stack([ii[order], jj[order]], axis=1), ww[order])


def patch_pca(
    points: np.ndarray, center: tuple[int, int], camera_center: np.ndarray
) -> PatchAnalysis:
    """Plane-fit a 3x3 point patch by PCA of its unnormalized covariance.

    The normal is the unit eigenvector of the smallest eigenvalue, oriented
    toward the camera center. Eigenvalues are reported descending; the
    curvature weight is exp(-10 * smallest / sum).

    Raises:
        DegeneratePatchError: if all nine points coincide.
        ValueError: if the center does not own a full 3x3 neighborhood.
    """
    points = np.asarray(points, dtype=float)
    i, j = center
    h, w = points.shape[:2]
    if not (1 <= i <= h - 2 and 1 <= j <= w - 2):
        raise ValueError(f"patch center ({i}, {j}) must be at least 1 pixel from borders")
    patch = points[i - 1 : i + 2, j - 1 : j + 2].reshape(-1, 3)
    centroid = patch.mean(axis=0)
    centered = patch - centroid
    if not np.any(centered):
        raise DegeneratePatchError(f"all patch points at ({i}, {j}) coincide")
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    normal = eigvecs[:, 0]
    if normal @ (np.asarray(camera_center, dtype=float) - centroid) < 0:
        normal = -normal
    eigvals = np.clip(eigvals, 0.0, None)
    w_kappa = float(np.exp(-CURVATURE_SHARPNESS * eigvals[0] / eigvals.sum()))
    return PatchAnalysis(
        normal=normal,
        eigenvalues=eigvals[::-1].copy(),
        centroid=centroid,
        curvature_weight=w_kappa,
    )


def patch_pair_term(n_current: np.ndarray, n_neighbor: np.ndarray, w_kappa: float) -> float:
    """Curvature-weighted cosine gap for one patch pair; sign-invariant.

    The cosine magnitude is clamped to 1 so rounding on unit vectors cannot
    produce a negative term.
    """
    cos = min(1.0, abs(float(np.dot(n_current, n_neighbor))))
    return w_kappa * (1.0 - cos)


def mvgeo_loss(
    depth_current: np.ndarray,
    depth_neighbor: np.ndarray,
    rendered_current: np.ndarray,
    rendered_neighbor: np.ndarray,
    unbiased_current: np.ndarray,
    unbiased_neighbor: np.ndarray,
    cam_current: Camera,
    cam_neighbor: Camera,
    cfg: MvConfig,
) -> tuple[float, MvLossReport]:
    """Full cross-view consistency pipeline for one view pair.

    Weights come from each view's rendered/plane-induced depth gap, the
    fused weights gate a deterministic top-s pixel sample, and each sampled
    pixel contributes the curvature-weighted cosine gap between the PCA
    normals of its two patches (neighbor patch rigidly moved into the
    current frame). Patch pairs rejected as degenerate are excluded; if no
    pair survives the loss is 0 and the report is flagged empty.
    """
    fields = [
        np.asarray(f, dtype=float)
        for f in (
            depth_current,
            depth_neighbor,
            rendered_current,
            rendered_neighbor,
            unbiased_current,
            unbiased_neighbor,
        )
    ]
    shapes = {f.shape for f in fields}
    if len(shapes) != 1:
        raise ValueError(f"views must share field dimensions, got {sorted(shapes)}")

    w_current = depth_weight_map(rendered_current, unbiased_current)
    w_neighbor = depth_weight_map(rendered_neighbor, unbiased_neighbor)
    w_avg = fuse_weights(w_current, w_neighbor, cfg.beta)

    points_current = backproject_depth(fields[0], cam_current)
    valid = validity_mask(
        points_current, cam_current.pose, cam_neighbor.pose, cam_neighbor, cfg.eps_d
    )
    candidates, gamma = candidate_set(w_avg, valid, cfg.gamma_fraction)
    samples = top_s_sample(candidates, w_avg, cfg.s)

    points_neighbor = backproject_depth(fields[1], cam_neighbor)
    points_moved = transform_points(points_neighbor, cam_neighbor.pose, cam_current.pose)

    origin = np.zeros(3)
    terms: list[float] = []
    kappas: list[float] = []
    for i, j in samples.pixels:
        try:
            current_patch = patch_pca(points_current, (int(i), int(j)), origin)
            neighbor_patch = patch_pca(points_moved, (int(i), int(j)), origin)
        except DegeneratePatchError:
            continue
        kappas.append(current_patch.curvature_weight)
        terms.append(
            patch_pair_term(
                current_patch.normal,
                neighbor_patch.normal,
                current_patch.curvature_weight,
            )
        )

    report = MvLossReport(
        loss=math.fsum(terms) / len(terms) if terms else 0.0,
        n_candidates=int(candidates.sum()),
        n_sampled=len(samples),
        n_accepted_patches=len(terms),
        gamma=gamma,
        mean_w_kappa=math.fsum(kappas) / len(kappas) if kappas else 0.0,
        empty=not terms,
    )
    return report.loss, report
