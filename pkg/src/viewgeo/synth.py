"""Analytic two-view scene generator with controlled corruptions.

Renders posed depth / plane-distance / normal / RGB maps for three surface
families (tilted plane, sphere cap, sine heightfield) by exact per-pixel
ray intersection, so every loss in the package has a known zero. A
counter-based Philox generator drives the corruption streams, making them
reproducible and order-independent.

World frame = the first camera's frame when that camera has the identity
pose: x right, y down, z forward.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Camera, Pose

KINDS = ("tilted-plane", "sphere-cap", "sine-heightfield")
TEXTURES = ("checker", "flat", "half-checker-half-flat")

_CHECKER_BRIGHT = (0.85, 0.85, 0.85)
_CHECKER_DARK = (0.15, 0.15, 0.15)


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    geometry: dict
    texture: dict
    cameras: tuple[Camera, ...]
    depth_sigma: float = 0.0
    normal_sigma_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.texture.get("type") not in TEXTURES:
            raise ValueError(f"unknown texture type {self.texture.get('type')!r}")
        if self.depth_sigma < 0 or self.normal_sigma_deg < 0:
            raise ValueError("noise levels must be non-negative")
        if not self.cameras:
            raise ValueError("at least one camera required")
        object.__setattr__(self, "cameras", tuple(self.cameras))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "geometry": self.geometry,
            "texture": self.texture,
            "cameras": [
                {
                    "fx": c.fx,
                    "fy": c.fy,
                    "cx": c.cx,
                    "cy": c.cy,
                    "width": c.width,
                    "height": c.height,
                    "rotation": c.pose.rotation.tolist(),
                    "translation": c.pose.translation.tolist(),
                }
                for c in self.cameras
            ],
            "noise": {
                "depth_sigma": self.depth_sigma,
                "normal_sigma_deg": self.normal_sigma_deg,
            },
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        cameras = tuple(
            Camera(
                fx=float(c["fx"]),
                fy=float(c["fy"]),
                cx=float(c["cx"]),
                cy=float(c["cy"]),
                width=int(c["width"]),
                height=int(c["height"]),
                pose=Pose(np.array(c["rotation"], dtype=float), np.array(c["translation"], dtype=float)),
            )
            for c in d["cameras"]
        )
        noise = d.get("noise", {})
        return SceneSpec(
            kind=d["kind"],
            geometry=d["geometry"],
            texture=d["texture"],
            cameras=cameras,
            depth_sigma=float(noise.get("depth_sigma", 0.0)),
            normal_sigma_deg=float(noise.get("normal_sigma_deg", 0.0)),
            seed=int(d.get("seed", 0)),
        )

    def sha256(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class ViewBundle:
    rgb: np.ndarray
    depth: np.ndarray
    plane_distance: np.ndarray
    normals: np.ndarray
    cam: Camera


def look_at(center: np.ndarray, target: np.ndarray, down=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose for a camera at `center` looking at `target`."""
    center = np.asarray(center, dtype=float)
    z_axis = np.asarray(target, dtype=float) - center
    z_axis = z_axis / np.linalg.norm(z_axis)
    x_axis = np.cross(np.asarray(down, dtype=float), z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.stack([x_axis, y_axis, z_axis])
    return Pose(rotation, -rotation @ center)


def _intersect(spec: SceneSpec, origin: np.ndarray, directions: np.ndarray, cam_index: int):
    """Per-pixel ray parameter s and world normal of the hit point.

    Directions are the world-frame images of the camera rays K⁻¹p̃, so s is
    exactly the camera-frame depth of the hit.
    """
    geometry = spec.geometry
    if spec.kind == "tilted-plane":
        normal = np.asarray(geometry["normal"], dtype=float)
        normal = normal / np.linalg.norm(normal)
        offset = float(normal @ np.asarray(geometry["point"], dtype=float))
        denom = directions @ normal
        miss = np.abs(denom) < 1e-12
        s = np.where(miss, -1.0, (offset - origin @ normal) / np.where(miss, 1.0, denom))
        _reject_misses(s <= 0, cam_index, "ray parallel to or leaving the plane")
        normals = np.broadcast_to(normal, directions.shape).copy()
        return s, normals

    if spec.kind == "sphere-cap":
        center = np.asarray(geometry["center"], dtype=float)
        radius = float(geometry["radius"])
        oc = origin - center
        a = np.einsum("ijk,ijk->ij", directions, directions)
        b = 2.0 * directions @ oc
        c = oc @ oc - radius * radius
        disc = b * b - 4.0 * a * c
        _reject_misses(disc < 0, cam_index, "ray misses the sphere")
        s = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
        _reject_misses(s <= 0, cam_index, "sphere behind the camera")
        hits = origin + s[..., None] * directions
        return s, (hits - center) / radius

    # sine-heightfield: z = base_z + A sin(2πf x) sin(2πf y)
    base_z = float(geometry["base_z"])
    amp = float(geometry["amplitude"])
    omega = 2.0 * math.pi * float(geometry["frequency"])
    dx, dy, dz = directions[..., 0], directions[..., 1], directions[..., 2]
    _reject_misses(dz <= 0, cam_index, "ray never reaches the heightfield")
    s = (base_z - origin[2]) / dz
    for _ in range(80):
        x = origin[0] + s * dx
        y = origin[1] + s * dy
        sx, cx_ = np.sin(omega * x), np.cos(omega * x)
        sy, cy_ = np.sin(omega * y), np.cos(omega * y)
        f = origin[2] + s * dz - base_z - amp * sx * sy
        fp = dz - amp * omega * (cx_ * sy * dx + sx * cy_ * dy)
        step = f / fp
        s = s - step
        if np.max(np.abs(f)) < 1e-13:
            break
    x = origin[0] + s * dx
    y = origin[1] + s * dy
    f = origin[2] + s * dz - base_z - amp * np.sin(omega * x) * np.sin(omega * y)
    _reject_misses((np.abs(f) > 1e-9) | (s <= 0), cam_index, "heightfield intersection failed")
    normals = np.stack(
        [
            -amp * omega * np.cos(omega * x) * np.sin(omega * y),
            -amp * omega * np.sin(omega * x) * np.cos(omega * y),
            np.ones_like(x),
        ],
        axis=-1,
    )
    return s, normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def _reject_misses(bad: np.ndarray, cam_index: int, why: str) -> None:
    bad = np.asarray(bad)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"camera {cam_index}, pixel ({i}, {j}): {why}")


def _texture_rgb(texture: dict, hits: np.ndarray, cell_world: float) -> np.ndarray:
    kind = texture["type"]
    flat_value = np.asarray(texture.get("value", (0.5, 0.5, 0.5)), dtype=float)
    if kind == "flat":
        return np.broadcast_to(flat_value, hits.shape).copy()
    bright = np.asarray(texture.get("color_a", _CHECKER_BRIGHT), dtype=float)
    dark = np.asarray(texture.get("color_b", _CHECKER_DARK), dtype=float)
    parity = (
        np.floor(hits[..., 0] / cell_world) + np.floor(hits[..., 1] / cell_world)
    ) % 2
    checker = np.where(parity[..., None] == 0, bright, dark)
    if kind == "checker":
        return checker
    split = float(texture.get("split_x", 0.0))
    return np.where(hits[..., 0:1] < split, checker, flat_value)


def render_scene(spec: SceneSpec) -> list[ViewBundle]:
    """Render noise-free ground-truth bundles for every camera in the spec.

    Depth is exact camera-frame z from analytic ray intersection, normals
    are the analytic surface normals in camera frame (unit, camera-facing),
    and the plane-distance field is depth * (normal · K⁻¹p̃) so the bundle
    is self-consistent by construction. RGB samples the procedural texture
    at the world hit point. Any pixel ray that misses the surface rejects
    the spec with the offending pixel coordinate.
    """
    cell_world = None
    bundles = []
    for index, cam in enumerate(spec.cameras):
        rays = cam.ray_directions()
        rotation = cam.pose.rotation
        origin = cam.pose.camera_center()
        directions = rays @ rotation  # world-frame ray directions R^T d
        depth, normals_world = _intersect(spec, origin, directions, index)
        hits_world = origin + depth[..., None] * directions
        normals_cam = normals_world @ rotation.T
        points_cam = depth[..., None] * rays
        facing_away = np.einsum("ijk,ijk->ij", normals_cam, points_cam) > 0
        normals_cam[facing_away] = -normals_cam[facing_away]
        plane_distance = depth * np.einsum("ijk,ijk->ij", normals_cam, rays)
        if cell_world is None:
            # Checker cell size in pixels, converted at the first camera's
            # central depth so the texture is anchored to the surface.
            z_ref = depth[cam.height // 2, cam.width // 2]
            cell_world = float(spec.texture.get("cell_px", 8)) * z_ref / spec.cameras[0].fx
        rgb = _texture_rgb(spec.texture, hits_world, cell_world)
        bundles.append(
            ViewBundle(
                rgb=rgb,
                depth=depth,
                plane_distance=plane_distance,
                normals=normals_cam,
                cam=cam,
            )
        )
    return bundles


def _local_plane_offsets(depth: np.ndarray, normals: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Mean per-pixel plane offset n·X over the pixel and its 4-neighbors."""
    offsets = depth * np.einsum("ijk,ijk->ij", normals, rays)
    total = offsets.copy()
    count = np.ones_like(offsets)
    total[1:, :] += offsets[:-1, :]
    count[1:, :] += 1
    total[:-1, :] += offsets[1:, :]
    count[:-1, :] += 1
    total[:, 1:] += offsets[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += offsets[:, 1:]
    count[:, :-1] += 1
    return total / count


def corrupt(
    bundle: ViewBundle, depth_sigma: float, normal_sigma_deg: float, seed: int
) -> ViewBundle:
    """Deterministically noise a bundle's depth and normals.

    Depth gets zero-mean Gaussian noise; each normal is rotated about a
    random axis by a zero-mean Gaussian angle and renormalized. The
    plane-distance field is rebuilt from the corrupted depth and normals as
    a local (4-neighborhood) average of per-pixel plane offsets, so the
    corrupted bundle's plane-induced depth no longer reproduces its depth
    map, mimicking the blending of nearby surface elements. Zero sigmas
    return the input unchanged.
    """
    if depth_sigma < 0 or normal_sigma_deg < 0:
        raise ValueError("noise levels must be non-negative")
    if depth_sigma == 0.0 and normal_sigma_deg == 0.0:
        return bundle
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))
    shape = bundle.depth.shape

    depth = bundle.depth
    if depth_sigma > 0.0:
        depth = depth + rng.normal(0.0, depth_sigma, size=shape)

    normals = bundle.normals
    if normal_sigma_deg > 0.0:
        axes = rng.normal(size=shape + (3,))
        axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
        angles = rng.normal(0.0, math.radians(normal_sigma_deg), size=shape)
        cos_a = np.cos(angles)[..., None]
        sin_a = np.sin(angles)[..., None]
        dot = np.einsum("ijk,ijk->ij", axes, normals)[..., None]
        normals = normals * cos_a + np.cross(axes, normals) * sin_a + axes * dot * (1.0 - cos_a)
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    rays = bundle.cam.ray_directions()
    plane_distance = _local_plane_offsets(depth, normals, rays)
    return replace(bundle, depth=depth, normals=normals, plane_distance=plane_distance)


def observed_bundles(spec: SceneSpec) -> list[ViewBundle]:
    """Render the spec and apply its own noise settings, one stream per view."""
    return [
        corrupt(b, spec.depth_sigma, spec.normal_sigma_deg, seed=spec.seed + k)
        for k, b in enumerate(render_scene(spec))
    ]


def _default_geometry(kind: str) -> dict:
    if kind == "tilted-plane":
        return {"normal": [0.25, -0.15, -1.0], "point": [0.0, 0.0, 4.0]}
    if kind == "sphere-cap":
        return {"center": [0.0, 0.0, 4.0], "radius": 2.8}
    return {"base_z": 4.0, "amplitude": 0.3, "frequency": 0.15}


def _default_texture(name: str, cell_px: int) -> dict:
    if name == "flat":
        return {"type": "flat", "value": [0.5, 0.5, 0.5]}
    if name == "checker":
        return {"type": "checker", "cell_px": cell_px}
    return {"type": "half-checker-half-flat", "cell_px": cell_px, "value": [0.5, 0.5, 0.5], "split_x": 0.0}


def make_two_view_spec(
    kind: str = "tilted-plane",
    size: int = 48,
    texture: str = "checker",
    cell_px: int = 8,
    depth_sigma: float = 0.0,
    normal_sigma_deg: float = 0.0,
    seed: int = 0,
    identical_poses: bool = False,
    geometry: dict | None = None,
) -> SceneSpec:
    """Build a ready-to-render two-camera spec with sensible defaults.

    The second camera sits a small baseline to the side and re-aims at the
    surface; with identical_poses=True it duplicates the first camera so the
    two point clouds coincide exactly. The sphere rig narrows the field of
    view to keep every corner ray on the cap.
    """
    fx = 0.8 * size if kind == "sphere-cap" else 0.4 * size
    c = (size - 1) / 2.0
    cam0 = Camera(fx=fx, fy=fx, cx=c, cy=c, width=size, height=size, pose=Pose.identity())
    if identical_poses:
        cam1 = cam0
    else:
        target = np.array([0.0, 0.0, 4.0])
        cam1 = Camera(
            fx=fx, fy=fx, cx=c, cy=c, width=size, height=size,
            pose=look_at(np.array([0.3, 0.05, 0.0]), target),
        )
    return SceneSpec(
        kind=kind,
        geometry=_default_geometry(kind) if geometry is None else geometry,
        texture=_default_texture(texture, cell_px),
        cameras=(cam0, cam1),
        depth_sigma=depth_sigma,
        normal_sigma_deg=normal_sigma_deg,
        seed=seed,
    )
