"""Pinhole cameras, rigid transforms, and depth/normal conversions.

Coordinate conventions used throughout:

  Camera frame (right-handed, standard computer vision):
    x right, y down, z forward along the optical axis. A depth map stores
    the camera-frame z coordinate of the surface point seen by each pixel,
    not the ray length.

  Pixel coordinates:
    pixel (i, j) = (row, column) has image-plane coordinates u = j, v = i;
    pixel centers sit at integer coordinates.

  Pose:
    a Pose is the world-to-camera rigid transform in block form
    [R t; 0 1], i.e. X_cam = R @ X_world + t. The camera center in world
    coordinates is -R^T @ t. Transferring points from camera "src" to
    camera "dst" composes dst ∘ src⁻¹.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9
DENOMINATOR_EPS = 1e-6


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform (rotation + translation)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMALITY_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix [R t; 0 1]."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply the transform to an (..., 3) array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not (0 <= self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) field of K⁻¹ p̃ for every pixel; z component is 1."""
        jj, ii = np.meshgrid(
            np.arange(self.width, dtype=float),
            np.arange(self.height, dtype=float),
        )
        return np.stack(
            [
                (jj - self.cx) / self.fx,
                (ii - self.cy) / self.fy,
                np.ones_like(jj),
            ],
            axis=-1,
        )


def _check_scalar_field(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2D field, got shape {a.shape}")
    return a


def _check_vector_field(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"{name} must be an (H, W, 3) field, got shape {a.shape}")
    return a


def backproject_depth(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Lift a depth map to camera-frame 3D points.

    The point at pixel (i, j) is depth(i, j) * K⁻¹ [j, i, 1]^T, so its z
    component equals the stored depth.

    Raises:
        ValueError: if any depth is non-positive (reports the first such pixel).
    """
    depth = _check_scalar_field(depth, "depth")
    if depth.shape != (cam.height, cam.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match camera "
            f"({cam.height}, {cam.width})"
        )
    bad = np.argwhere(depth <= 0)
    if bad.size:
        i, j = bad[0]
        raise ValueError(f"non-positive depth {depth[i, j]} at pixel ({i}, {j})")
    return depth[..., None] * cam.ray_directions()


def unbiased_depth(
    plane_distance: np.ndarray, normals: np.ndarray, cam: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Depth induced by per-pixel plane parameters along each pixel ray.

    Computes D(p) / (N(p) · K⁻¹ p̃). Pixels whose denominator magnitude
    falls below 1e-6 (plane nearly containing the ray) are reported in the
    returned validity mask and their output value is set to 0.

    Returns:
        (depth_hat, valid) where valid is a boolean (H, W) mask, True for
        pixels with a well-conditioned denominator.
    """
    plane_distance = _check_scalar_field(plane_distance, "plane_distance")
    normals = _check_vector_field(normals, "normals")
    if plane_distance.shape != normals.shape[:2]:
        raise ValueError("plane_distance and normals dimensions do not match")
    rays = cam.ray_directions()
    denom = np.einsum("ijk,ijk->ij", normals, rays)
    valid = np.abs(denom) >= DENOMINATOR_EPS
    out = np.zeros_like(plane_distance)
    np.divide(plane_distance, denom, out=out, where=valid)
    return out, valid


def normal_from_depth(depth: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Estimate per-pixel normals from a depth map.

    Backprojects the depth map and crosses the central-difference tangents
    ∂X/∂u × ∂X/∂v (one-sided at borders). Normals are unit length and
    oriented toward the camera (dot with the camera-to-point direction ≤ 0).
    Pixels with a vanishing cross product get the (0, 0, 0) sentinel and are
    flagged False in the returned validity mask.
    """
    return point_map_normals(backproject_depth(depth, cam))


def point_map_normals(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normals of an (H, W, 3) camera-frame point map; see normal_from_depth."""
    points = _check_vector_field(points, "points")
    h, w = points.shape[:2]

    du = np.empty_like(points)
    if w == 1:
        du[:] = 0.0
    else:
        du[:, 1:-1] = (points[:, 2:] - points[:, :-2]) / 2.0
        du[:, 0] = points[:, 1] - points[:, 0]
        du[:, -1] = points[:, -1] - points[:, -2]

    dv = np.empty_like(points)
    if h == 1:
        dv[:] = 0.0
    else:
        dv[1:-1, :] = (points[2:, :] - points[:-2, :]) / 2.0
        dv[0, :] = points[1, :] - points[0, :]
        dv[-1, :] = points[-1, :] - points[-2, :]

    normals = np.cross(du, dv)
    norms = np.linalg.norm(normals, axis=-1)
    valid = norms > 0.0
    normals[valid] /= norms[valid][..., None]
    normals[~valid] = 0.0

    # Camera sits at the origin of its own frame; flip normals that point away.
    away = np.einsum("ijk,ijk->ij", normals, points) > 0.0
    normals[away] = -normals[away]
    return normals, valid


def transform_points(points: np.ndarray, src: Pose, dst: Pose) -> np.ndarray:
    """Re-express points given in the src camera frame in the dst frame.

    Applies dst ∘ src⁻¹ (the matrix product dst.matrix() @ inv(src.matrix()))
    to every point. Exact (0, 0, 0) sentinel entries pass through unchanged.
    """
    pts = np.asarray(points, dtype=float)
    rel = dst.compose(src.inverse())
    out = rel.apply(pts)
    sentinel = np.all(pts == 0.0, axis=-1)
    if np.any(sentinel):
        out = np.where(sentinel[..., None], pts, out)
    return out


def project_point(point: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points through the pinhole model.

    Returns (u, v, z) with u = fx·x/z + cx, v = fy·y/z + cy and z passed
    through unchanged. No bounds or sign checks are applied here; callers
    mask out-of-frustum results themselves.
    """
    p = np.asarray(point, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * x / z + cam.cx
        v = cam.fy * y / z + cam.cy
    return u, v, z
