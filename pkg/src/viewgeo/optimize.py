"""Desk-scale descent on per-view depth and normal fields.

The observed data are corrupted two-view bundles; the state holds one
log-depth field (positivity by construction) and one normal field
(renormalized after every step) per view. The objective is

    lam_data * mean |z - z_obs|  +  sum_views svgeo  +  lam3 * mvgeo,

where each view's plane-induced depth is rebuilt every evaluation from the
state itself: the plane of each 4-neighbor, intersected with the pixel
ray, averaged. Two gradient modes exist: full central finite differences
over every parameter (exact but desk-scale only), and an analytic mode
that uses the closed-form single-view gradients, treats the derived maps
(weights, masks, depth-derived normals, plane-induced depth) as constants
of the iteration, and differentiates the sampled multi-view term by local
finite differences over its patch support with the sample set frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, backproject_depth, point_map_normals, transform_points
from .multi_view import (
    DegeneratePatchError,
    MvConfig,
    MvLossReport,
    candidate_set,
    fuse_weights,
    mvgeo_loss,
    patch_pca,
    patch_pair_term,
    top_s_sample,
    validity_mask,
)
from .partition import (
    depth_weight_map,
    gradient_magnitude,
    percentile_threshold,
    sobel_gradients,
    texture_partition,
    trust_region,
)
from .single_view import (
    SvConfig,
    discrepancy_field,
    kink_sign,
    svgeo_gradients,
    svgeo_loss,
)
from .synth import ViewBundle

GRAD_MODES = ("analytic-where-available", "finite-difference")


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the last finite iteration index."""

    def __init__(self, last_good_iteration: int):
        super().__init__(f"non-finite loss after iteration {last_good_iteration}")
        self.last_good_iteration = last_good_iteration


@dataclass(frozen=True)
class OptimConfig:
    """Descent settings.

    lam_data defaults to 0.05 here: the L1 anchor's constant-magnitude
    subgradient, amplified by the log-depth parameterization, otherwise
    leaves a terminal oscillation on far pixels that exceeds the gentle
    geometric pull toward the true surface. theta defaults to 0.7 (the low
    end of the stable band) because the max-normalized weight map of a
    noisy field leaves too much of the image untrusted at 0.8 for the
    smoothing terms to reach. use_svgeo exists for ablation runs that keep
    only the data anchor.
    """

    step_size: float = 2.0
    iterations: int = 200
    lam1: float = 0.05
    lam2: float = 0.01
    lam3: float = 0.001
    lam_data: float = 0.05
    grad_mode: str = "analytic-where-available"
    fd_step: float = 1e-4  # relative
    theta: float = 0.7
    percentile: float = 75.0
    beta: float = 0.5
    eps_d: float = 0.1
    gamma_fraction: float = 0.3
    s: int = 16
    use_svgeo: bool = True

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")

    def sv_config(self) -> SvConfig:
        return SvConfig(
            lam1=self.lam1, lam2=self.lam2, theta=self.theta, percentile=self.percentile
        )

    def mv_config(self) -> MvConfig:
        return MvConfig(
            beta=self.beta,
            eps_d=self.eps_d,
            gamma_fraction=self.gamma_fraction,
            s=self.s,
            lam3=self.lam3,
        )


@dataclass
class OptimState:
    log_depth: list[np.ndarray]
    normals: list[np.ndarray]
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    def depths(self) -> list[np.ndarray]:
        return [np.exp(s) for s in self.log_depth]

    def copy(self) -> "OptimState":
        return OptimState(
            log_depth=[s.copy() for s in self.log_depth],
            normals=[n.copy() for n in self.normals],
            iteration=self.iteration,
            history=list(self.history),
        )


def normal_rms_deg(normals: np.ndarray, reference: np.ndarray) -> float:
    """Root-mean-square angle in degrees between two unit normal fields."""
    dots = np.clip(np.einsum("ijk,ijk->ij", normals, reference), -1.0, 1.0)
    return float(np.degrees(np.sqrt(np.mean(np.arccos(dots) ** 2))))


def depth_rms(depth: np.ndarray, reference: np.ndarray) -> float:
    return float(np.sqrt(np.mean((depth - reference) ** 2)))


def reference_normals(depth: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Normals of the locally averaged backprojected surface.

    The point map is box-filtered (3x3, twice, replicate-padded) before the
    tangent cross product. Averaging 3D points keeps exact planes exact
    while suppressing per-pixel depth noise; deriving the reference from
    the raw depth would chase that noise, and deriving it from the
    state-normal-seeded plane depth couples the reference to the very field
    being optimized, which destabilizes the iteration.
    """
    points = backproject_depth(depth, cam)
    for _ in range(2):
        padded = np.pad(points, ((1, 1), (1, 1), (0, 0)), mode="edge")
        points = np.lib.stride_tricks.sliding_window_view(
            padded, (3, 3), axis=(0, 1)
        ).mean(axis=(3, 4))
    return point_map_normals(points)


def neighbor_plane_depth(depth: np.ndarray, normals: np.ndarray, cam: Camera) -> np.ndarray:
    """Depth at each pixel induced by its 4-neighbors' local planes.

    Neighbor q carries the plane with normal n_q through its own 3D point
    (offset n_q · X_q); that plane meets the ray of pixel p at depth
    offset_q / (n_q · ray_p). Averages the available neighbors; pixels with
    no usable neighbor (grazing planes) fall back to their own depth.
    """
    rays = cam.ray_directions()
    offsets = depth * np.einsum("ijk,ijk->ij", normals, rays)
    total = np.zeros_like(depth)
    count = np.zeros_like(depth)
    neighbor_pairs = (
        ((slice(1, None), slice(None)), (slice(None, -1), slice(None))),
        ((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
        ((slice(None), slice(1, None)), (slice(None), slice(None, -1))),
        ((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
    )
    for dst, src in neighbor_pairs:
        denom = np.einsum("ijk,ijk->ij", normals[src], rays[dst])
        ok = np.abs(denom) >= 1e-6
        total[dst] += np.where(ok, offsets[src] / np.where(ok, denom, 1.0), 0.0)
        count[dst] += ok
    has = count > 0
    out = depth.copy()
    out[has] = total[has] / count[has]
    return out


class Problem:
    """Observed two-view data plus the static per-view texture partition."""

    def __init__(self, observed: list[ViewBundle], cfg: OptimConfig):
        if not observed:
            raise ValueError("need at least one observed view")
        self.cfg = cfg
        self.views = list(observed)
        self.rich: list[np.ndarray] = []
        self.less: list[np.ndarray] = []
        for b in observed:
            h, w = b.depth.shape
            if h < 3 or w < 3:
                # No gradient support: everything counts as texture-rich.
                self.rich.append(np.ones((h, w), dtype=bool))
                self.less.append(np.zeros((h, w), dtype=bool))
                continue
            g = gradient_magnitude(*sobel_gradients(b.rgb))
            tau = percentile_threshold(g, cfg.percentile)
            rich, less = texture_partition(g, tau)
            self.rich.append(rich)
            self.less.append(less)

    def initial_state(self) -> OptimState:
        return OptimState(
            log_depth=[np.log(b.depth) for b in self.views],
            normals=[b.normals.copy() for b in self.views],
        )

    def _view_fields(self, state: OptimState, k: int):
        depth = np.exp(state.log_depth[k])
        normals = state.normals[k]
        bundle = self.views[k]
        depth_hat = neighbor_plane_depth(depth, normals, bundle.cam)
        weights = depth_weight_map(depth, depth_hat)
        nd, nd_valid = reference_normals(depth, bundle.cam)
        mask = self.rich[k] & trust_region(weights, self.cfg.theta) & nd_valid
        delta = discrepancy_field(depth, depth_hat)
        return depth, normals, depth_hat, weights, nd, mask, delta

    def total_loss(self, state: OptimState) -> tuple[float, dict]:
        cfg = self.cfg
        data_terms = []
        svn = cross = tv = svgeo = 0.0
        depths = []
        hats = []
        for k, bundle in enumerate(self.views):
            depth, normals, depth_hat, weights, nd, mask, delta = self._view_fields(state, k)
            depths.append(depth)
            hats.append(depth_hat)
            data_terms.append(np.abs(depth - bundle.depth).ravel())
            if cfg.use_svgeo:
                rep = svgeo_loss(
                    bundle.rgb, nd, normals, weights, delta, mask, self.less[k], cfg.sv_config()
                )
                svn += rep.l_svn
                cross += rep.l_cross
                tv += rep.tv_normal
                svgeo += rep.l_svgeo
        data = cfg.lam_data * float(np.concatenate(data_terms).mean())

        mv_value = 0.0
        mv_report: MvLossReport | None = None
        if len(self.views) >= 2 and cfg.lam3 != 0.0 and cfg.s > 0:
            b0, b1 = self.views[0], self.views[1]
            mv_value, mv_report = mvgeo_loss(
                depths[0], depths[1], depths[0], depths[1], hats[0], hats[1],
                b0.cam, b1.cam, cfg.mv_config(),
            )
        total = data + svgeo + cfg.lam3 * mv_value
        report = {
            "total": total,
            "data": data,
            "svn": svn,
            "cross": cross,
            "tv": tv,
            "mvgeo": mv_value,
        }
        if mv_report is not None:
            report["mv_report"] = mv_report
        return total, report

    # ----- analytic-mode gradients -------------------------------------

    def _frozen_mv_gradients(self, state: OptimState) -> list[np.ndarray]:
        """d(lam3 * mvgeo)/d(depth) with the pixel sample frozen.

        Only depths inside the sampled 3x3 patches influence the term; each
        is probed by central differences, re-fitting just the patches that
        contain the probed pixel.
        """
        cfg = self.cfg
        grads = [np.zeros_like(s) for s in state.log_depth]
        if len(self.views) < 2 or cfg.lam3 == 0.0 or cfg.s == 0:
            return grads
        b0, b1 = self.views[0], self.views[1]
        z0, z1 = np.exp(state.log_depth[0]), np.exp(state.log_depth[1])
        hat0 = neighbor_plane_depth(z0, state.normals[0], b0.cam)
        hat1 = neighbor_plane_depth(z1, state.normals[1], b1.cam)
        w_avg = fuse_weights(
            depth_weight_map(z0, hat0), depth_weight_map(z1, hat1), cfg.beta
        )
        points0 = backproject_depth(z0, b0.cam)
        valid = validity_mask(points0, b0.cam.pose, b1.cam.pose, b1.cam, cfg.eps_d)
        candidates, _ = candidate_set(w_avg, valid, cfg.gamma_fraction)
        samples = top_s_sample(candidates, w_avg, cfg.s)
        if len(samples) == 0:
            return grads

        rays0 = b0.cam.ray_directions()
        rays1 = b1.cam.ray_directions()
        points1 = backproject_depth(z1, b1.cam)
        moved1 = transform_points(points1, b1.cam.pose, b0.cam.pose)
        origin = np.zeros(3)
        rel = b0.cam.pose.compose(b1.cam.pose.inverse())

        def pair_term(pts0, pts1, center) -> float | None:
            try:
                cur = patch_pca(pts0, center, origin)
                nb = patch_pca(pts1, center, origin)
            except DegeneratePatchError:
                return None
            return patch_pair_term(cur.normal, nb.normal, cur.curvature_weight)

        centers = [(int(i), int(j)) for i, j in samples.pixels]
        base = {c: pair_term(points0, moved1, c) for c in centers}
        n_terms = sum(1 for t in base.values() if t is not None)
        if n_terms == 0:
            return grads

        # pixel -> patch centers that contain it, per view cloud
        support: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for ci, cj in centers:
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    support.setdefault((ci + di, cj + dj), []).append((ci, cj))

        scale = cfg.lam3 / n_terms
        for (pi, pj), owners in support.items():
            h0 = cfg.fd_step * max(abs(z0[pi, pj]), 1e-6)
            h1 = cfg.fd_step * max(abs(z1[pi, pj]), 1e-6)
            # view 0: move the current-cloud point along its ray
            diff0 = 0.0
            saved = points0[pi, pj].copy()
            for sign, hh in ((1.0, h0), (-1.0, h0)):
                points0[pi, pj] = (z0[pi, pj] + sign * hh) * rays0[pi, pj]
                probe = math.fsum(
                    (pair_term(points0, moved1, c) or 0.0) - (base[c] or 0.0)
                    for c in owners
                )
                diff0 += sign * probe
            points0[pi, pj] = saved
            grads[0][pi, pj] += scale * diff0 / (2.0 * h0)
            # view 1: the moved neighbor point
            diff1 = 0.0
            saved = moved1[pi, pj].copy()
            for sign, hh in ((1.0, h1), (-1.0, h1)):
                moved1[pi, pj] = rel.apply((z1[pi, pj] + sign * hh) * rays1[pi, pj])
                probe = math.fsum(
                    (pair_term(points0, moved1, c) or 0.0) - (base[c] or 0.0)
                    for c in owners
                )
                diff1 += sign * probe
            moved1[pi, pj] = saved
            grads[1][pi, pj] += scale * diff1 / (2.0 * h1)
        return grads

    def gradients(self, state: OptimState) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """(d/d log-depth, d/d normals), per view, in the configured mode."""
        if self.cfg.grad_mode == "finite-difference":
            return self._fd_gradients(state)
        cfg = self.cfg
        n_pixels = sum(b.depth.size for b in self.views)
        grad_logz = []
        grad_n = []
        mv_depth_grads = self._frozen_mv_gradients(state)
        for k, bundle in enumerate(self.views):
            depth, normals, depth_hat, weights, nd, mask, delta = self._view_fields(state, k)
            if cfg.use_svgeo:
                gn, gd = svgeo_gradients(
                    bundle.rgb, nd, normals, weights, delta, mask, self.less[k], cfg.sv_config()
                )
            else:
                gn = np.zeros_like(normals)
                gd = np.zeros_like(depth)
            gz = gd + cfg.lam_data * kink_sign(depth - bundle.depth) / n_pixels
            gz += mv_depth_grads[k]
            grad_logz.append(gz * depth)  # chain rule through z = exp(s)
            grad_n.append(gn)
        return grad_logz, grad_n

    def _fd_gradients(self, state: OptimState) -> tuple[list[np.ndarray], list[np.ndarray]]:
        cfg = self.cfg
        grad_logz = [np.zeros_like(s) for s in state.log_depth]
        grad_n = [np.zeros_like(n) for n in state.normals]
        probe = state.copy()
        for k in range(len(self.views)):
            s_field = state.log_depth[k]
            it = np.ndindex(s_field.shape)
            for idx in it:
                h = cfg.fd_step * max(abs(s_field[idx]), 1e-6)
                probe.log_depth[k][idx] = s_field[idx] + h
                up, _ = self.total_loss(probe)
                probe.log_depth[k][idx] = s_field[idx] - h
                dn, _ = self.total_loss(probe)
                probe.log_depth[k][idx] = s_field[idx]
                grad_logz[k][idx] = (up - dn) / (2.0 * h)
            n_field = state.normals[k]
            for idx in np.ndindex(n_field.shape):
                h = cfg.fd_step * max(abs(n_field[idx]), 1e-6)
                probe.normals[k][idx] = n_field[idx] + h
                up, _ = self.total_loss(probe)
                probe.normals[k][idx] = n_field[idx] - h
                dn, _ = self.total_loss(probe)
                probe.normals[k][idx] = n_field[idx]
                grad_n[k][idx] = (up - dn) / (2.0 * h)
        return grad_logz, grad_n

    def step(self, state: OptimState) -> OptimState:
        """One descent update; renormalizes normals and records the loss."""
        grad_logz, grad_n = self.gradients(state)
        new = state.copy()
        for k in range(len(self.views)):
            new.log_depth[k] -= self.cfg.step_size * grad_logz[k]
            n = new.normals[k] - self.cfg.step_size * grad_n[k]
            # renormalize only what moved; untouched unit vectors stay bit-exact
            moved = np.any(grad_n[k] != 0.0, axis=-1)
            norms = np.linalg.norm(n, axis=-1)
            ok = moved & (norms > 1e-12)
            n[ok] /= norms[ok][..., None]
            n[moved & ~ok] = new.normals[k][moved & ~ok]
            new.normals[k] = n
        new.iteration = state.iteration + 1
        if not all(np.isfinite(s).all() for s in new.log_depth):
            raise DivergenceError(last_good_iteration=state.iteration)
        try:
            # overflow here is the diagnosed condition, not an accident
            with np.errstate(over="ignore", invalid="ignore"):
                total, report = self.total_loss(new)
        except (ValueError, FloatingPointError) as e:
            # exp() under/overflow in the depth decode surfaces here
            raise DivergenceError(last_good_iteration=state.iteration) from e
        if not np.isfinite(total):
            raise DivergenceError(last_good_iteration=state.iteration)
        new.history.append(
            {
                "iteration": new.iteration,
                "total": report["total"],
                "data": report["data"],
                "svn": report["svn"],
                "cross": report["cross"],
                "tv": report["tv"],
                "mvgeo": report["mvgeo"],
            }
        )
        return new

    def run(self, state: OptimState | None = None) -> OptimState:
        if state is None:
            state = self.initial_state()
        for _ in range(self.cfg.iterations):
            state = self.step(state)
        return state
